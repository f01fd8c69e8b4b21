"""Synthetic multi-robot datasets, g2o ingestion, partitioning and serialization.

Multi-robot problem text format (one record per line, ``#`` comments)::

    MESA_PROBLEM 1
    NAME <name>
    DIMS <2|3>
    ROBOTS <id> ...
    TRUTH <key> <value>                      ground truth (optional)
    VERTEX <robot> <key> <value>             robot's initial copy of a variable
    SHARED <key> <home> <robot> ...          replicated variable, home robot first
    FACTOR <robot> PRIOR <key> <value> INFO <upper>
    FACTOR <robot> BETWEEN <key> <key> <value> INFO <upper>
    FACTOR <robot> RANGE <key> <key> <distance> INFO <upper>
    FACTOR <robot> BEARING_RANGE <key> <key> <bearing> <range> INFO <upper>
    ANCHOR <robot> PRIOR <key> <value> INFO <upper>   per-robot gauge prior

Keys are written ``robot:index``.  Values are ``SE2 x y r00 r01 r10 r11``,
``SE3 x y z r00 ... r22`` (row-major rotation) or ``R<n> v1 ... vn``.
``INFO`` lists the upper triangle (row-major) of the information matrix in
rotation-first tangent order.  Floats are written with ``repr`` so a
save/load cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .factorgraph import (
    BearingRangeFactor,
    BetweenFactor,
    Factor,
    FactorGraph,
    Key,
    NoiseModel,
    PriorFactor,
    RangeFactor,
    Values,
)
from .manifold import Pose, between, compose, exp_map, pose_tangent_dim, so3_exp


class InvalidConfig(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path or '<text>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class UnsupportedTag(ParseError):
    pass


class Disconnected(ValueError):
    pass


# --------------------------------------------------------------------------
# problem container


@dataclass
class MultiRobotProblem:
    dims: int
    factors: dict  # robot -> list[Factor], pairwise disjoint
    initial: dict  # robot -> Values (robot's copies, replicated ones included)
    home: dict  # Key -> owning robot
    ground_truth: dict | None = None
    anchors: dict = field(default_factory=dict)  # robot -> PriorFactor for independent solves
    name: str = ""

    @property
    def robots(self) -> list[int]:
        return sorted(self.initial)

    def owners(self) -> dict:
        out = defaultdict(list)
        for r in self.robots:
            for k in self.initial[r]:
                out[k].append(r)
        return {k: tuple(v) for k, v in out.items()}

    def shared(self, i: int, j: int) -> list:
        return sorted(set(self.initial[i]) & set(self.initial[j]))

    @property
    def edges(self) -> list[tuple[int, int]]:
        rs = self.robots
        return [(i, j) for a, i in enumerate(rs) for j in rs[a + 1 :] if self.shared(i, j)]

    def all_factors(self) -> list[Factor]:
        return [f for r in self.robots for f in self.factors.get(r, [])]

    def is_inter_robot(self, factor: Factor) -> bool:
        return len({self.home[k] for k in factor.keys}) > 1

    def validate(self) -> None:
        ids = [id(f) for f in self.all_factors()]
        if len(ids) != len(set(ids)):
            raise ValueError("robot factor sets are not disjoint")
        for r in self.robots:
            used = {k for f in self.factors.get(r, []) for k in f.keys}
            missing = used - set(self.initial[r])
            if missing:
                raise ValueError(f"robot {r} lacks copies of {sorted(missing)[:3]}")
            for f in self.factors.get(r, []):
                homes = {self.home[k] for k in f.keys}
                if len(homes) > 2 or (len(homes) == 2 and r not in homes):
                    raise ValueError(f"{f!r} on robot {r} spans robots {sorted(homes)}")
        for k, owners in self.owners().items():
            if self.home.get(k) not in owners:
                raise ValueError(f"home robot of {k} holds no copy")


# --------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticConfig:
    dims: int = 3
    robots: int = 4
    length: int = 400
    # [forward, then +/- 90 deg about each rotation axis]; None -> forward 0.7, rest even
    odometry_probs: tuple | None = None
    loop_prob: float = 0.4
    step: float = 1.0
    # None -> 1.5 * step
    proximity: float | None = None
    inter_period: int = 10
    # poses this recent are never used for intra-robot loop closures
    loop_min_separation: int = 5
    sigma_rot_deg: float = 1.0
    sigma_trans: float = 0.05
    # "pose" | "range" | "bearing-range"
    inter_measurement: str = "pose"
    # half-width of the box the grid walk is confined to
    extent: float = 5.0
    add_noise: bool = True
    seed: int = 0

    def actions(self) -> list[np.ndarray]:
        if self.dims == 2:
            return [np.eye(2), _rot2(math.pi / 2), _rot2(-math.pi / 2)]
        out = [np.eye(3)]
        for axis in np.eye(3):
            for sign in (1.0, -1.0):
                out.append(np.rint(so3_exp((sign * math.pi / 2 * axis)[None])[0]))
        return out

    def probabilities(self) -> np.ndarray:
        n = 3 if self.dims == 2 else 7
        if self.odometry_probs is None:
            return np.array([0.7] + [0.3 / (n - 1)] * (n - 1))
        return np.asarray(self.odometry_probs, dtype=float)

    @property
    def proximity_threshold(self) -> float:
        return 1.5 * self.step if self.proximity is None else self.proximity

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise InvalidConfig("dims must be 2 or 3")
        if self.robots < 1 or self.length < 1:
            raise InvalidConfig("robots and length must be positive")
        p = self.probabilities()
        if p.size != (3 if self.dims == 2 else 7) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise InvalidConfig("odometry probabilities must be non-negative and sum to 1")
        if not 0 <= self.loop_prob <= 1:
            raise InvalidConfig("loop_prob must lie in [0, 1]")
        if not (self.sigma_rot_deg > 0 and self.sigma_trans > 0):
            raise InvalidConfig("noise sigmas must be positive")
        if self.inter_period < 1 or self.step <= 0:
            raise InvalidConfig("inter_period and step must be positive")
        if self.inter_measurement not in ("pose", "range", "bearing-range"):
            raise InvalidConfig(f"unknown inter-robot measurement {self.inter_measurement!r}")
        if self.inter_measurement == "bearing-range" and self.dims != 2:
            raise InvalidConfig("bearing-range measurements are planar only")


def _rot2(a: float) -> np.ndarray:
    return np.rint(np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]))


def pose_sigmas(dims: int, sigma_rot: float, sigma_trans: float) -> np.ndarray:
    k = 1 if dims == 2 else 3
    return np.array([sigma_rot] * k + [sigma_trans] * dims)


def generate(config: SyntheticConfig) -> MultiRobotProblem:
    """Grid-walk trajectories for a robot team with noisy relative measurements."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dims, step = config.dims, config.step
    sig_r = math.radians(config.sigma_rot_deg)
    sigmas = pose_sigmas(dims, sig_r, config.sigma_trans)
    pose_noise = NoiseModel.from_sigmas(sigmas)
    actions = config.actions()
    probs = config.probabilities()
    prox = config.proximity_threshold
    n_r = config.robots
    extent = max(config.extent, (n_r // 2 + 1) * step)

    def noisy_relative(rel: Pose) -> Pose:
        eps = rng.normal(size=sigmas.size) * sigmas
        return compose(rel, exp_map(eps, dims)) if config.add_noise else rel

    truth: dict = {}
    positions = {r: [] for r in range(n_r)}
    factors = {r: [] for r in range(n_r)}
    initial = {r: {} for r in range(n_r)}
    home = {}

    for r in range(n_r):
        t0 = np.zeros(dims)
        t0[1] = (r - n_r // 2) * step
        p0 = Pose(np.eye(dims), t0)
        k = Key(r, 0)
        truth[k] = p0
        home[k] = r
        initial[r][k] = p0
        positions[r].append(p0.translation)

    prior0 = PriorFactor(Key(0, 0), truth[Key(0, 0)], pose_noise)
    factors[0].append(prior0)
    anchors = {0: prior0}
    for r in range(1, n_r):
        anchors[r] = PriorFactor(Key(r, 0), truth[Key(r, 0)], pose_noise)

    def add_inter(r: int, t: int):
        cur = Key(r, t)
        here = truth[cur].translation
        for o in range(n_r):
            if o == r:
                continue
            pos = np.array(positions[o][: t + 1])
            d = np.linalg.norm(pos - here, axis=1)
            idx = int(np.argmin(d))
            if d[idx] > prox:
                continue
            other = Key(o, idx)
            rel = between(truth[cur], truth[other])
            kind = config.inter_measurement
            if kind == "pose":
                m = noisy_relative(rel)
                f = BetweenFactor(cur, other, m, pose_noise)
                guess = compose(initial[r][cur], m)
            elif kind == "range":
                dist = float(np.linalg.norm(rel.translation))
                if config.add_noise:
                    dist += rng.normal() * config.sigma_trans
                f = RangeFactor(cur, other, dist, NoiseModel.from_sigmas([config.sigma_trans]))
                guess = initial[o][other]
            else:
                local = rel.translation
                b, rr = math.atan2(local[1], local[0]), float(np.linalg.norm(local))
                if config.add_noise:
                    b += rng.normal() * sig_r
                    rr += rng.normal() * config.sigma_trans
                f = BearingRangeFactor(
                    cur, other, b, rr, NoiseModel.from_sigmas([sig_r, config.sigma_trans])
                )
                guess = initial[o][other]
            factors[r].append(f)
            initial[r].setdefault(other, guess)

    for t in range(config.length):
        if t > 0:
            for r in range(n_r):
                prev = truth[Key(r, t - 1)]
                ok = []
                for a, rot in enumerate(actions):
                    nxt = prev.translation + prev.rotation @ rot @ np.eye(dims)[0] * step
                    if np.all(np.abs(nxt) <= extent + 1e-9):
                        ok.append(a)
                if not ok:
                    raise RuntimeError("grid walk is boxed in")
                p = probs[ok] / probs[ok].sum()
                a = ok[int(rng.choice(len(ok), p=p))]
                rel = Pose(actions[a], actions[a] @ np.eye(dims)[0] * step)
                cur_true = compose(prev, rel)
                k, kp = Key(r, t), Key(r, t - 1)
                truth[k] = cur_true
                home[k] = r
                positions[r].append(cur_true.translation)
                m = noisy_relative(rel)
                factors[r].append(BetweenFactor(kp, k, m, pose_noise))
                initial[r][k] = compose(initial[r][kp], m)
                # intra-robot loop closure
                if t > config.loop_min_separation and rng.random() < config.loop_prob:
                    pos = np.array(positions[r][: t - config.loop_min_separation + 1])
                    d = np.linalg.norm(pos - cur_true.translation, axis=1)
                    idx = int(np.argmin(d))
                    if d[idx] <= prox:
                        old = Key(r, idx)
                        lm = noisy_relative(between(truth[old], cur_true))
                        factors[r].append(BetweenFactor(old, k, lm, pose_noise))
        if t % config.inter_period == 0 and n_r > 1:
            for r in range(n_r):
                add_inter(r, t)

    return MultiRobotProblem(
        dims=dims,
        factors=factors,
        initial=initial,
        home=home,
        ground_truth=truth,
        anchors=anchors,
        name=f"synthetic-{dims}d-r{n_r}-l{config.length}-s{config.seed}",
    )


# --------------------------------------------------------------------------
# text encoding of values and factors


def _f(x) -> str:
    return repr(float(x))


def encode_value(v) -> str:
    if isinstance(v, Pose):
        tag = "SE2" if v.dim == 2 else "SE3"
        return " ".join([tag] + [_f(x) for x in v.translation] + [_f(x) for x in v.rotation.ravel()])
    v = np.asarray(v, dtype=float).reshape(-1)
    return " ".join([f"R{v.size}"] + [_f(x) for x in v])


def _decode_value(tokens: list[str], pos: int):
    tag = tokens[pos]
    if tag in ("SE2", "SE3"):
        n = 2 if tag == "SE2" else 3
        nums = [float(x) for x in tokens[pos + 1 : pos + 1 + n + n * n]]
        if len(nums) != n + n * n:
            raise ValueError("truncated pose")
        return Pose(np.array(nums[n:]).reshape(n, n), np.array(nums[:n])), pos + 1 + n + n * n
    if tag.startswith("R") and tag[1:].isdigit():
        n = int(tag[1:])
        nums = [float(x) for x in tokens[pos + 1 : pos + 1 + n]]
        if len(nums) != n:
            raise ValueError("truncated vector")
        return np.array(nums), pos + 1 + n
    raise ValueError(f"unknown value tag {tag!r}")


def decode_value(text: str):
    tokens = text.split()
    v, end = _decode_value(tokens, 0)
    if end != len(tokens):
        raise ValueError("trailing tokens after value")
    return v


def _encode_info(noise: NoiseModel) -> str:
    iu = np.triu_indices(noise.dim)
    return "INFO " + " ".join(_f(x) for x in noise.information[iu])


def _decode_info(tokens: list[str], pos: int) -> NoiseModel:
    if tokens[pos] != "INFO":
        raise ValueError("expected INFO")
    vals = [float(x) for x in tokens[pos + 1 :]]
    d = int(round((math.sqrt(8 * len(vals) + 1) - 1) / 2))
    if d * (d + 1) // 2 != len(vals) or d == 0:
        raise ValueError(f"{len(vals)} information entries is not a triangle")
    info = np.zeros((d, d))
    info[np.triu_indices(d)] = vals
    info = info + np.triu(info, 1).T
    return NoiseModel(info)


def encode_factor(f: Factor) -> str:
    if isinstance(f, PriorFactor):
        body = f"PRIOR {f.keys[0]} {encode_value(f.measured)}"
    elif isinstance(f, BetweenFactor):
        body = f"BETWEEN {f.keys[0]} {f.keys[1]} {encode_value(f.measured)}"
    elif isinstance(f, RangeFactor):
        body = f"RANGE {f.keys[0]} {f.keys[1]} {_f(f.measured)}"
    elif isinstance(f, BearingRangeFactor):
        body = f"BEARING_RANGE {f.keys[0]} {f.keys[1]} {_f(f.bearing)} {_f(f.range)}"
    else:
        raise TypeError(f"cannot serialize {type(f).__name__}")
    return f"{body} {_encode_info(f.noise)}"


def decode_factor(tokens: list[str]) -> Factor:
    tag = tokens[0]
    if tag == "PRIOR":
        v, pos = _decode_value(tokens, 2)
        return PriorFactor(Key.parse(tokens[1]), v, _decode_info(tokens, pos))
    a, b = Key.parse(tokens[1]), Key.parse(tokens[2])
    if tag == "BETWEEN":
        v, pos = _decode_value(tokens, 3)
        return BetweenFactor(a, b, v, _decode_info(tokens, pos))
    if tag == "RANGE":
        return RangeFactor(a, b, float(tokens[3]), _decode_info(tokens, 4))
    if tag == "BEARING_RANGE":
        return BearingRangeFactor(a, b, float(tokens[3]), float(tokens[4]), _decode_info(tokens, 5))
    raise ValueError(f"unknown factor type {tag!r}")


def encode_message(pairs) -> str:
    """Text form of an exchanged payload: one ``<key> <value>`` line per variable."""
    return "".join(f"{k} {encode_value(v)}\n" for k, v in pairs)


def decode_message(text: str) -> list[tuple]:
    out = []
    for ln in text.splitlines():
        if ln.strip():
            key, _, rest = ln.strip().partition(" ")
            out.append((Key.parse(key), decode_value(rest)))
    return out


def problem_to_text(problem: MultiRobotProblem) -> str:
    out = ["MESA_PROBLEM 1", f"NAME {problem.name or '-'}", f"DIMS {problem.dims}"]
    out.append("ROBOTS " + " ".join(str(r) for r in problem.robots))
    if problem.ground_truth:
        for k in sorted(problem.ground_truth):
            out.append(f"TRUTH {k} {encode_value(problem.ground_truth[k])}")
    for r in problem.robots:
        for k in sorted(problem.initial[r]):
            out.append(f"VERTEX {r} {k} {encode_value(problem.initial[r][k])}")
    for k, owners in sorted(problem.owners().items()):
        if len(owners) > 1:
            h = problem.home[k]
            rest = " ".join(str(o) for o in owners if o != h)
            out.append(f"SHARED {k} {h} {rest}")
    for r in problem.robots:
        for f in problem.factors.get(r, []):
            out.append(f"FACTOR {r} {encode_factor(f)}")
    for r in sorted(problem.anchors):
        out.append(f"ANCHOR {r} {encode_factor(problem.anchors[r])}")
    return "\n".join(out) + "\n"


def problem_from_text(text: str, path=None) -> MultiRobotProblem:
    dims = None
    name = ""
    robots: list[int] = []
    truth: dict = {}
    initial: dict = {}
    factors: dict = {}
    anchors: dict = {}
    shared_home: dict = {}
    seen_header = False
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        t = line.split()
        try:
            tag = t[0]
            if tag == "MESA_PROBLEM":
                if t[1] != "1":
                    raise ParseError(f"unsupported format version {t[1]}", n, path)
                seen_header = True
            elif tag == "NAME":
                name = "" if t[1] == "-" else " ".join(t[1:])
            elif tag == "DIMS":
                dims = int(t[1])
            elif tag == "ROBOTS":
                robots = [int(x) for x in t[1:]]
                for r in robots:
                    initial.setdefault(r, {})
                    factors.setdefault(r, [])
            elif tag == "TRUTH":
                truth[Key.parse(t[1])] = decode_value(" ".join(t[2:]))
            elif tag == "VERTEX":
                initial.setdefault(int(t[1]), {})[Key.parse(t[2])] = decode_value(" ".join(t[3:]))
            elif tag == "SHARED":
                shared_home[Key.parse(t[1])] = int(t[2])
            elif tag == "FACTOR":
                factors.setdefault(int(t[1]), []).append(decode_factor(t[2:]))
            elif tag == "ANCHOR":
                anchors[int(t[1])] = decode_factor(t[2:])
            else:
                raise UnsupportedTag(f"unsupported record {tag!r}", n, path)
        except ParseError:
            raise
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{exc} in {line[:60]!r}", n, path) from None
    if not seen_header:
        raise ParseError("missing MESA_PROBLEM header", None, path)
    if dims is None:
        raise ParseError("missing DIMS record", None, path)
    home = {}
    for r in sorted(initial):
        for k in initial[r]:
            home.setdefault(k, shared_home.get(k, r))
    # reuse identical prior objects so the gauge prior is not counted twice
    for r, a in anchors.items():
        for f in factors.get(r, []):
            if isinstance(f, PriorFactor) and encode_factor(f) == encode_factor(a):
                anchors[r] = f
    return MultiRobotProblem(dims, factors, initial, home, truth or None, anchors, name)


def save_problem(problem: MultiRobotProblem, path) -> None:
    Path(path).write_text(problem_to_text(problem))


def load_problem(path) -> MultiRobotProblem:
    path = Path(path)
    return problem_from_text(path.read_text(), path)


# --------------------------------------------------------------------------
# g2o


_SE2_PERM = [2, 0, 1]
_SE3_PERM = [3, 4, 5, 0, 1, 2]


def _upper_to_full(vals, d: int) -> np.ndarray:
    info = np.zeros((d, d))
    info[np.triu_indices(d)] = vals
    return info + np.triu(info, 1).T


def _quat_pose(t, q) -> Pose:
    q = np.asarray(q, dtype=float)
    return Pose.from_quaternion(t, q / np.linalg.norm(q))


def load_g2o(path) -> tuple[FactorGraph, Values]:
    """Read SE(2)/SE(3) vertices and edges; keys are ``Key(0, id)``.

    Information matrices are permuted from g2o's translation-first order to
    rotation-first order.
    """
    path = Path(path)
    graph = FactorGraph()
    values: Values = {}
    with path.open() as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            t = line.split()
            tag = t[0]
            try:
                if tag == "VERTEX_SE2":
                    if len(t) != 5:
                        raise ValueError(f"expected 4 fields, got {len(t) - 1}")
                    x, y, th = map(float, t[2:5])
                    values[Key(0, int(t[1]))] = Pose.from_xytheta(x, y, th)
                elif tag == "VERTEX_SE3:QUAT":
                    if len(t) != 9:
                        raise ValueError(f"expected 8 fields, got {len(t) - 1}")
                    nums = list(map(float, t[2:9]))
                    values[Key(0, int(t[1]))] = _quat_pose(nums[:3], nums[3:])
                elif tag == "EDGE_SE2":
                    if len(t) != 12:
                        raise ValueError(f"expected 11 fields, got {len(t) - 1}")
                    a, b = int(t[1]), int(t[2])
                    nums = list(map(float, t[3:12]))
                    info = _upper_to_full(nums[3:], 3)[np.ix_(_SE2_PERM, _SE2_PERM)]
                    graph.add(
                        BetweenFactor(Key(0, a), Key(0, b), Pose.from_xytheta(*nums[:3]), NoiseModel(info))
                    )
                elif tag == "EDGE_SE3:QUAT":
                    if len(t) != 31:
                        raise ValueError(f"expected 30 fields, got {len(t) - 1}")
                    a, b = int(t[1]), int(t[2])
                    nums = list(map(float, t[3:31]))
                    info = _upper_to_full(nums[7:], 6)[np.ix_(_SE3_PERM, _SE3_PERM)]
                    graph.add(
                        BetweenFactor(Key(0, a), Key(0, b), _quat_pose(nums[:3], nums[3:7]), NoiseModel(info))
                    )
                else:
                    raise UnsupportedTag(f"unsupported g2o record {tag!r}", n, path)
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(f"{exc} in {tag} record", n, path) from None
    return graph, values


def _inv_perm(perm):
    out = [0] * len(perm)
    for i, p in enumerate(perm):
        out[p] = i
    return out


def write_g2o(graph, values: Values, path) -> None:
    """Write poses and pose-pose between factors in g2o format (keys by index)."""
    lines = []
    for k in sorted(values):
        v = values[k]
        if v.dim == 2:
            lines.append(f"VERTEX_SE2 {k.index} {_f(v.translation[0])} {_f(v.translation[1])} {_f(v.theta)}")
        else:
            nums = list(v.translation) + list(v.quaternion())
            lines.append(f"VERTEX_SE3:QUAT {k.index} " + " ".join(_f(x) for x in nums))
    for f in graph:
        if not isinstance(f, BetweenFactor) or not isinstance(f.measured, Pose):
            continue
        m = f.measured
        a, b = f.keys
        if m.dim == 2:
            perm = _inv_perm(_SE2_PERM)
            info = f.noise.information[np.ix_(perm, perm)]
            nums = [m.translation[0], m.translation[1], m.theta] + list(info[np.triu_indices(3)])
            lines.append(f"EDGE_SE2 {a.index} {b.index} " + " ".join(_f(x) for x in nums))
        else:
            perm = _inv_perm(_SE3_PERM)
            info = f.noise.information[np.ix_(perm, perm)]
            nums = list(m.translation) + list(m.quaternion()) + list(info[np.triu_indices(6)])
            lines.append(f"EDGE_SE3:QUAT {a.index} {b.index} " + " ".join(_f(x) for x in nums))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# partitioning


BALANCE_FACTOR = 1.2
GAUGE_PRIOR_SIGMA = 1e-3


def _adjacency(graph, keys) -> dict:
    adj = {k: set() for k in keys}
    for f in graph:
        for a in f.keys:
            for b in f.keys:
                if a != b:
                    adj.setdefault(a, set()).add(b)
    return adj


def _check_connected(adj: dict) -> None:
    if not adj:
        return
    start = min(adj)
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(adj):
        raise Disconnected(f"{len(adj) - len(seen)} of {len(adj)} vertices unreachable from {start}")


def bfs_partition(adj: dict, n_parts: int) -> dict:
    """Grow ``n_parts`` parts of at most ``ceil(n / n_parts)`` vertices by BFS."""
    keys = sorted(adj)
    target = math.ceil(len(keys) / n_parts)
    part = {}
    for p in range(n_parts):
        size = 0
        queue: deque = deque()
        while size < target:
            if not queue:
                free = [k for k in keys if k not in part]
                if not free:
                    break
                # continue from the part's frontier when possible
                seed = next((k for k in free if any(part.get(nb) == p for nb in adj[k])), free[0])
                queue.append(seed)
            k = queue.popleft()
            if k in part:
                continue
            part[k] = p
            size += 1
            queue.extend(sorted(nb for nb in adj[k] if nb not in part))
    return part


def load_partition_file(path, keys) -> dict:
    """METIS-style partition: one part id per line, in sorted-vertex order."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    keys = sorted(keys)
    if len(lines) != len(keys):
        raise ParseError(f"partition lists {len(lines)} vertices, graph has {len(keys)}", None, path)
    try:
        return {k: int(x) for k, x in zip(keys, lines)}
    except ValueError as exc:
        raise ParseError(str(exc), None, path) from None


def partition(graph, values: Values, n_parts: int, assignment: dict | None = None,
              name: str = "") -> MultiRobotProblem:
    """Split a single graph into a multi-robot problem.

    A factor goes to the part of its first variable; the other endpoints of a
    crossing factor are replicated into that part.  One gauge prior on the
    smallest key fixes the global frame.
    """
    keys = sorted(values)
    adj = _adjacency(graph, keys)
    _check_connected(adj)
    if n_parts < 1:
        raise ValueError("n_parts must be positive")
    if n_parts > len(keys):
        raise ValueError("more parts than vertices")
    part = dict(assignment) if assignment is not None else bfs_partition(adj, n_parts)
    if set(part) != set(adj):
        raise ValueError("partition does not cover the graph's vertices")
    parts = sorted(set(part.values()))
    factors = {p: [] for p in parts}
    initial = {p: {} for p in parts}
    for k in keys:
        initial[part[k]][k] = values[k]
    for f in graph:
        p = part[f.keys[0]]
        factors[p].append(f)
        for k in f.keys:
            initial[p].setdefault(k, values[k])
    k0 = keys[0]
    dim = values[k0].dim if isinstance(values[k0], Pose) else None
    d = pose_tangent_dim(dim) if dim else np.size(values[k0])
    prior = PriorFactor(k0, values[k0], NoiseModel.isotropic(d, GAUGE_PRIOR_SIGMA))
    factors[part[k0]].insert(0, prior)
    dims = dim or int(np.size(values[k0]))
    return MultiRobotProblem(
        dims=dims,
        factors=factors,
        initial=initial,
        home=dict(part),
        ground_truth=None,
        anchors={part[k0]: prior},
        name=name,
    )


def balance(problem: MultiRobotProblem) -> float:
    """Largest part size over the mean part size."""
    counts = defaultdict(int)
    for k, r in problem.home.items():
        counts[r] += 1
    sizes = list(counts.values())
    return max(sizes) / (sum(sizes) / len(sizes))
