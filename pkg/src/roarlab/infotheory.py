"""Exact information-theoretic verification on enumerable discrete worlds.

A world is a fully specified joint distribution over a data variable (a
small pixel vector), a class label, and an explainer choice; each
explainer assigns every input a deterministic importance ranking of the
pixels. Dropping the top-ranked pixels (replaced by a distinct sentinel so
the mask shape stays observable) yields the masked-input variable whose
mutual information with the label is the quantity removal benchmarks
drive down.

A coarsening maps rankings to rankings (the discrete analogue of
attribution post-processing). The module computes exact conditional MI to
verify the data-processing inequality on the explainer side, and searches
the full coarsening space for witnesses that reduce the masked input's
information about the label.

All logarithms are base 2; entropies and MI are in bits.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

DROPPED = "*"  # sentinel for removed pixels; distinct from every pixel value

VARIABLES = ("x", "y", "e", "a", "ka", "xm", "kxm")
_NEEDS_COARSENING = ("ka", "kxm")


@dataclass(frozen=True)
class Coarsening:
    """Deterministic, possibly many-to-one map on pixel rankings."""

    mapping: dict[tuple[int, ...], tuple[int, ...]]

    def __call__(self, ranking: tuple[int, ...]) -> tuple[int, ...]:
        return self.mapping.get(ranking, ranking)

    @staticmethod
    def identity() -> "Coarsening":
        return Coarsening({})


@dataclass
class DiscreteWorld:
    """Fully enumerated joint over (input, label, explainer) with rankings.

    xs: tuple of pixel-value tuples; p_xy: (len(xs), num_classes) joint
    probabilities; p_e: (num_explainers,) explainer distribution,
    independent of (x, y); rankings[e][xi]: permutation of pixel indices,
    most important first; drop: how many top-ranked pixels are removed.
    """

    xs: tuple[tuple[int, ...], ...]
    p_xy: np.ndarray
    p_e: np.ndarray
    rankings: tuple[tuple[tuple[int, ...], ...], ...]
    drop: int
    name: str = "world"

    def __post_init__(self):
        self.p_xy = np.asarray(self.p_xy, dtype=np.float64)
        self.p_e = np.asarray(self.p_e, dtype=np.float64)
        d = self.num_pixels
        if self.p_xy.ndim != 2 or self.p_xy.shape[0] != len(self.xs):
            raise ValueError("p_xy must be (num_inputs, num_classes)")
        if (self.p_xy < 0).any() or (self.p_e < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if abs(self.p_xy.sum() - 1.0) > 1e-12:
            raise ValueError(f"p_xy sums to {self.p_xy.sum()!r}, not 1")
        if abs(self.p_e.sum() - 1.0) > 1e-12:
            raise ValueError(f"p_e sums to {self.p_e.sum()!r}, not 1")
        if len(self.rankings) != len(self.p_e):
            raise ValueError("one ranking table per explainer required")
        for table in self.rankings:
            if len(table) != len(self.xs):
                raise ValueError("one ranking per input required")
            for r in table:
                if sorted(r) != list(range(d)):
                    raise ValueError(f"{r} is not a permutation of 0..{d - 1}")
        if not 0 <= self.drop <= d:
            raise ValueError("drop must lie in [0, num_pixels]")

    @property
    def num_pixels(self) -> int:
        return len(self.xs[0])

    @property
    def num_classes(self) -> int:
        return self.p_xy.shape[1]

    def ranking_alphabet(self) -> tuple[tuple[int, ...], ...]:
        """Rankings that occur with positive explainer probability, sorted."""
        seen = set()
        for e, pe in enumerate(self.p_e):
            if pe > 0:
                seen.update(self.rankings[e])
        return tuple(sorted(seen))


def _masked(x: tuple[int, ...], ranking: tuple[int, ...], drop: int) -> tuple:
    out = list(x)
    for pixel in ranking[:drop]:
        out[pixel] = DROPPED
    return tuple(out)


def atoms(world: DiscreteWorld, k: Coarsening | None = None):
    """Yield (prob, values) per elementary event; values keyed by VARIABLES."""
    k = k or Coarsening.identity()
    for e, pe in enumerate(world.p_e):
        if pe == 0:
            continue
        for xi, x in enumerate(world.xs):
            a = world.rankings[e][xi]
            ka = k(a)
            xm = _masked(x, a, world.drop)
            kxm = _masked(x, ka, world.drop)
            for y in range(world.num_classes):
                p = pe * world.p_xy[xi, y]
                if p > 0:
                    yield p, {"x": x, "y": y, "e": e, "a": a,
                              "ka": ka, "xm": xm, "kxm": kxm}


def joint_table(world: DiscreteWorld, u: str, v: str,
                k: Coarsening | None = None) -> tuple[np.ndarray, list, list]:
    """Exact joint probability table over two named variables."""
    for name in (u, v):
        if name not in VARIABLES:
            raise ValueError(f"unknown variable {name!r}; known: {VARIABLES}")
        if name in _NEEDS_COARSENING and k is None:
            raise ValueError(f"variable {name!r} requires a coarsening")
    acc: dict[tuple, float] = {}
    for p, vals in atoms(world, k):
        key = (vals[u], vals[v])
        acc[key] = acc.get(key, 0.0) + p
    u_vals = sorted({key[0] for key in acc}, key=repr)
    v_vals = sorted({key[1] for key in acc}, key=repr)
    table = np.zeros((len(u_vals), len(v_vals)))
    ui = {val: i for i, val in enumerate(u_vals)}
    vi = {val: i for i, val in enumerate(v_vals)}
    for (a, b), p in acc.items():
        table[ui[a], vi[b]] = p
    return table, u_vals, v_vals


def entropy(p) -> float:
    """Shannon entropy in bits; 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if (p < 0).any():
        raise ValueError("negative probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def mutual_information(p_joint) -> float:
    """I(U;V) in bits from a 2-d joint probability table."""
    p = np.asarray(p_joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"joint table must be 2-d, got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("negative probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"joint sums to {p.sum()!r}, not 1")
    pu = p.sum(axis=1)
    pv = p.sum(axis=0)
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            pij = p[i, j]
            if pij > 0:
                total += pij * math.log2(pij / (pu[i] * pv[j]))
    return total


def conditional_mi(world: DiscreteWorld, variables: tuple[str, str], condition: str,
                   k: Coarsening | None = None) -> float:
    """I(U;V|W) = sum_w p(w) I(U;V|W=w), computed exactly over the world."""
    u, v = variables
    for name in (u, v, condition):
        if name not in VARIABLES:
            raise ValueError(f"unknown variable {name!r}; known: {VARIABLES}")
        if name in _NEEDS_COARSENING and k is None:
            raise ValueError(f"variable {name!r} requires a coarsening")
    groups: dict[tuple, dict[tuple, float]] = {}
    for p, vals in atoms(world, k):
        w = vals[condition]
        key = (vals[u], vals[v])
        g = groups.setdefault(w, {})
        g[key] = g.get(key, 0.0) + p
    total = 0.0
    for g in groups.values():
        pw = sum(g.values())
        u_vals = sorted({key[0] for key in g}, key=repr)
        v_vals = sorted({key[1] for key in g}, key=repr)
        table = np.zeros((len(u_vals), len(v_vals)))
        ui = {val: i for i, val in enumerate(u_vals)}
        vi = {val: i for i, val in enumerate(v_vals)}
        for (a, b), prob in g.items():
            table[ui[a], vi[b]] = prob / pw
        total += pw * mutual_information(table)
    return total


def modified_variable(world: DiscreteWorld, k: Coarsening | None = None,
                      drop: int | None = None) -> tuple[np.ndarray, list]:
    """Joint table over (masked input, label).

    With a coarsening the masking follows the coarsened rankings; without
    one it follows the raw rankings. The returned rows are the masked-input
    values (sentinel-bearing tuples).
    """
    if drop is not None:
        if not 0 <= drop <= world.num_pixels:
            raise ValueError("drop must lie in [0, num_pixels]")
        world = DiscreteWorld(world.xs, world.p_xy, world.p_e, world.rankings,
                              drop, name=world.name)
    var = "xm" if k is None else "kxm"
    table, rows, _ = joint_table(world, var, "y", k)
    return table, rows


def bayes_accuracy(p_joint) -> float:
    """Best attainable accuracy sum_u max_y p(u, y) for a (U, Y) joint."""
    p = np.asarray(p_joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"joint table must be 2-d, got shape {p.shape}")
    if (p < 0).any():
        raise ValueError("negative probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"joint sums to {p.sum()!r}, not 1")
    return float(p.max(axis=1).sum())


@dataclass(frozen=True)
class DpiReport:
    lhs: float  # I(explainer; attribution | input)
    rhs: float  # I(explainer; coarsened attribution | input)
    holds: bool
    tol: float


def dpi_check(world: DiscreteWorld, k: Coarsening, tol: float = 1e-12) -> DpiReport:
    """Coarsening a ranking can never gain information about the explainer
    once the input is controlled; a violation is a build-breaking bug."""
    lhs = conditional_mi(world, ("e", "a"), "x")
    rhs = conditional_mi(world, ("e", "ka"), "x", k)
    return DpiReport(lhs=lhs, rhs=rhs, holds=rhs <= lhs + tol, tol=tol)


@dataclass
class Witness:
    k: Coarsening
    mi_raw: float
    mi_coarse: float
    bayes_raw: float
    bayes_coarse: float
    dpi: DpiReport
    index: int


@dataclass
class SearchResult:
    witness: Witness | None
    maps_checked: int
    exhausted: bool
    mi_raw: float
    bayes_raw: float


def all_coarsenings(world: DiscreteWorld):
    """All maps from occurring rankings to the full permutation alphabet,
    in a fixed lexicographic enumeration order."""
    domain = world.ranking_alphabet()
    codomain = sorted(itertools.permutations(range(world.num_pixels)))
    for images in itertools.product(codomain, repeat=len(domain)):
        yield Coarsening(dict(zip(domain, images)))


def search_space_size(world: DiscreteWorld) -> int:
    domain = world.ranking_alphabet()
    return math.factorial(world.num_pixels) ** len(domain)


def conjecture_search(world: DiscreteWorld, tol: float = 1e-9,
                      max_maps: int = 10 ** 6) -> SearchResult:
    """Exhaustively look for a coarsening that strictly lowers the masked
    input's information about the label while the explainer-side DPI holds.

    Enumeration order is fixed, so the first witness is reproducible. If
    the space exceeds max_maps the search stops early and reports that it
    was not exhausted.
    """
    raw_table, _ = modified_variable(world)
    mi_raw = mutual_information(raw_table)
    bayes_raw = bayes_accuracy(raw_table)
    checked = 0
    for idx, k in enumerate(all_coarsenings(world)):
        if checked >= max_maps:
            return SearchResult(None, checked, False, mi_raw, bayes_raw)
        checked += 1
        coarse_table, _ = modified_variable(world, k)
        mi_coarse = mutual_information(coarse_table)
        if mi_raw > mi_coarse + tol:
            report = dpi_check(world, k)
            if report.holds:
                witness = Witness(
                    k=k, mi_raw=mi_raw, mi_coarse=mi_coarse,
                    bayes_raw=bayes_raw, bayes_coarse=bayes_accuracy(coarse_table),
                    dpi=report, index=idx,
                )
                return SearchResult(witness, checked, False, mi_raw, bayes_raw)
    return SearchResult(None, checked, True, mi_raw, bayes_raw)


def default_world() -> DiscreteWorld:
    """Three-pixel world with a spatially redundant signal.

    Pixels 0 and 1 both carry the label; pixel 2 is independent noise. Both
    shipped explainers rank the noise pixel first, so raw masking (drop=2)
    always leaves one signal pixel intact. A coarsening that points both
    rankings at the redundant pair destroys the signal entirely, which is
    exactly the improvement-by-degradation the search exhibits.
    """
    xs = []
    p_rows = []
    for y in (0, 1):
        for noise in (0, 1):
            xs.append((y, y, noise))
            row = [0.0, 0.0]
            row[y] = 0.25
            p_rows.append(row)
    rank_e0 = tuple((2, 0, 1) for _ in xs)
    rank_e1 = tuple((2, 1, 0) for _ in xs)
    return DiscreteWorld(
        xs=tuple(xs),
        p_xy=np.array(p_rows),
        p_e=np.array([0.5, 0.5]),
        rankings=(rank_e0, rank_e1),
        drop=2,
        name="default-redundant-pair",
    )


def random_world(rng: np.random.Generator, max_pixels: int = 3,
                 max_classes: int = 3, max_explainers: int = 3) -> DiscreteWorld:
    """Random small world for property sweeps (full support joint)."""
    d = int(rng.integers(2, max_pixels + 1))
    c = int(rng.integers(2, max_classes + 1))
    ne = int(rng.integers(1, max_explainers + 1))
    xs = tuple(itertools.product((0, 1), repeat=d))
    p = rng.random((len(xs), c))
    p /= p.sum()
    pe = rng.random(ne)
    pe /= pe.sum()
    perms = list(itertools.permutations(range(d)))
    rankings = tuple(
        tuple(perms[int(rng.integers(0, len(perms)))] for _ in xs) for _ in range(ne)
    )
    drop = int(rng.integers(0, d + 1))
    return DiscreteWorld(xs, p, pe, rankings, drop, name="random")


def random_coarsening(world: DiscreteWorld, rng: np.random.Generator) -> Coarsening:
    perms = sorted(itertools.permutations(range(world.num_pixels)))
    mapping = {}
    for r in world.ranking_alphabet():
        mapping[r] = perms[int(rng.integers(0, len(perms)))]
    return Coarsening(mapping)


# ---------------------------------------------------------------------------
# plain-text world format: directive rows, probability rows, ranking rows


def save_world(world: DiscreteWorld, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(f"# discrete world: {world.name}\n")
        f.write(f"name {world.name}\n")
        f.write(f"pixels {world.num_pixels}\n")
        f.write(f"classes {world.num_classes}\n")
        f.write(f"drop {world.drop}\n")
        f.write("pe " + " ".join(f"{p:.17g}" for p in world.p_e) + "\n")
        for xi, x in enumerate(world.xs):
            for y in range(world.num_classes):
                if world.p_xy[xi, y] > 0:
                    f.write("p " + " ".join(str(v) for v in x)
                            + f" {y} {world.p_xy[xi, y]:.17g}\n")
        for e, table in enumerate(world.rankings):
            for xi, x in enumerate(world.xs):
                f.write(f"rank {e} " + " ".join(str(v) for v in x)
                        + " " + " ".join(str(r) for r in table[xi]) + "\n")


def load_world(path) -> DiscreteWorld:
    name = "world"
    d = c = drop = None
    pe: list[float] = []
    p_entries: list[tuple[tuple[int, ...], int, float]] = []
    rank_entries: list[tuple[int, tuple[int, ...], tuple[int, ...]]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            try:
                if tok[0] == "name":
                    name = tok[1]
                elif tok[0] == "pixels":
                    d = int(tok[1])
                elif tok[0] == "classes":
                    c = int(tok[1])
                elif tok[0] == "drop":
                    drop = int(tok[1])
                elif tok[0] == "pe":
                    pe = [float(v) for v in tok[1:]]
                elif tok[0] == "p":
                    x = tuple(int(v) for v in tok[1:1 + d])
                    p_entries.append((x, int(tok[1 + d]), float(tok[2 + d])))
                elif tok[0] == "rank":
                    e = int(tok[1])
                    x = tuple(int(v) for v in tok[2:2 + d])
                    r = tuple(int(v) for v in tok[2 + d:2 + 2 * d])
                    rank_entries.append((e, x, r))
                else:
                    raise ValueError(f"unknown directive {tok[0]!r}")
            except (IndexError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed line {line!r}") from exc
    if d is None or c is None or drop is None or not pe:
        raise ValueError(f"{path}: missing pixels/classes/drop/pe directives")
    xs = tuple(sorted({x for x, _, _ in p_entries} | {x for _, x, _ in rank_entries}))
    xi = {x: i for i, x in enumerate(xs)}
    p_xy = np.zeros((len(xs), c))
    for x, y, p in p_entries:
        p_xy[xi[x], y] += p
    rankings = [[None] * len(xs) for _ in pe]
    for e, x, r in rank_entries:
        rankings[e][xi[x]] = r
    for e, table in enumerate(rankings):
        for i, r in enumerate(table):
            if r is None:
                raise ValueError(f"{path}: missing ranking for explainer {e}, input {xs[i]}")
    return DiscreteWorld(xs, p_xy, np.array(pe), tuple(tuple(t) for t in rankings),
                         drop, name=name)
