"""Symmetric-maze localization world: map generation, robot simulation,
dataset files, and a classical bootstrap particle filter oracle.

Grid convention: cell (row, col) spans x in [col, col+1), y in [row,
row+1); poses are continuous (x, y, heading) with heading wrapped to
(-pi, pi]. Cell codes: 0 free, 1 gray obstacle, 2 black obstacle.
Landmarks sit on the corners of black cells.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import RngStream

log = logging.getLogger(__name__)

FREE, GRAY, BLACK = 0, 1, 2
_GRID_CHARS = {FREE: ".", GRAY: "+", BLACK: "#"}
_CHAR_CODES = {v: k for k, v in _GRID_CHARS.items()}

STEP_DISTANCE = 0.2
MOTION_NOISE = 0.02
OBS_NOISE = 0.1
N_OBSERVED_LANDMARKS = 5


class Pose(NamedTuple):
    x: float
    y: float
    theta: float


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    if wrapped == -math.pi:
        return math.pi
    return wrapped


@dataclass
class MazeMap:
    n: int
    cells: np.ndarray  # (n, n) int8
    landmarks: np.ndarray  # (L, 2) float, (x, y) corners of black cells
    seed: int

    def grid_strings(self):
        return ["".join(_GRID_CHARS[int(c)] for c in row) for row in self.cells]

    @classmethod
    def from_grid_strings(cls, rows, seed=0):
        cells = np.array([[_CHAR_CODES[ch] for ch in row] for row in rows],
                         dtype=np.int8)
        if cells.shape[0] != cells.shape[1]:
            raise ValueError("grid must be square")
        return cls(n=cells.shape[0], cells=cells,
                   landmarks=_black_corners(cells), seed=seed)

    def obstacle_mask(self):
        return self.cells != FREE

    def black_mask(self):
        return self.cells == BLACK

    def free_cells(self):
        rows, cols = np.nonzero(self.cells == FREE)
        return np.stack([rows, cols], axis=1)


def _black_corners(cells):
    corners = set()
    for r, c in zip(*np.nonzero(cells == BLACK)):
        for dx in (0, 1):
            for dy in (0, 1):
                corners.add((float(c + dx), float(r + dy)))
    return np.array(sorted(corners), dtype=np.float64).reshape(-1, 2)


def _connected(cells):
    free = cells == FREE
    total = int(free.sum())
    if total == 0:
        return False
    start = tuple(np.argwhere(free)[0])
    seen = np.zeros_like(free)
    stack = [start]
    seen[start] = True
    count = 0
    n = cells.shape[0]
    while stack:
        r, c = stack.pop()
        count += 1
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < n and 0 <= cc < n and free[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                stack.append((rr, cc))
    return count == total


def generate_maze(n, obstacle_density=0.2, seed=0, max_retries=100):
    """Seeded symmetric maze: obstacles sampled in the left half and
    mirrored across the vertical axis; obstacle cells alternate black
    (landmarked) and gray. Retries until the free space is connected
    and at least 5 landmark corners exist.
    """
    if n < 6:
        raise ValueError("maze size must be at least 6")
    rng = RngStream(seed)
    half = (n + 1) // 2
    for _ in range(max_retries):
        cells = np.zeros((n, n), dtype=np.int8)
        draws = rng.uniform(0.0, 1.0, (n, half))
        toggle = True
        for r in range(n):
            for c in range(half):
                border = r in (0, n - 1) or c == 0
                if border or draws[r, c] < obstacle_density:
                    cells[r, c] = BLACK if toggle else GRAY
                    toggle = not toggle
        for c in range(n // 2):
            cells[:, n - 1 - c] = cells[:, c]
        landmarks = _black_corners(cells)
        if landmarks.shape[0] >= N_OBSERVED_LANDMARKS and _connected(cells):
            return MazeMap(n=n, cells=cells, landmarks=landmarks, seed=seed)
    raise RuntimeError(
        f"no connected maze with >=5 landmarks in {max_retries} tries "
        f"(density {obstacle_density})"
    )


# ---------------------------------------------------------------------------
# robot kinematics


def segment_blocked(cells, x, y, theta, dist):
    """Exact grid traversal: does the segment of length dist cross an
    obstacle cell? Visits every cell the ray passes through."""
    n = cells.shape[0]
    dx = math.cos(theta)
    dy = math.sin(theta)
    cx = int(x)
    cy = int(y)
    if cells[cy, cx] != FREE:
        return True
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0.0:
        next_x = cx + 1 if dx > 0 else cx
        tmax_x = (next_x - x) / dx
        tdelta_x = abs(1.0 / dx)
    else:
        tmax_x = math.inf
        tdelta_x = math.inf
    if dy != 0.0:
        next_y = cy + 1 if dy > 0 else cy
        tmax_y = (next_y - y) / dy
        tdelta_y = abs(1.0 / dy)
    else:
        tmax_y = math.inf
        tdelta_y = math.inf
    while True:
        if tmax_x < tmax_y:
            if tmax_x > dist:
                return False
            cx += step_x
            tmax_x += tdelta_x
        else:
            if tmax_y > dist:
                return False
            cy += step_y
            tmax_y += tdelta_y
        if not (0 <= cx < n and 0 <= cy < n):
            return True  # beyond the border wall
        if cells[cy, cx] != FREE:
            return True


def random_free_pose(maze, rng):
    """Uniform over free cells, uniform within the cell, uniform heading."""
    free = maze.free_cells()
    idx = int(rng.integers(0, len(free), ()))
    r, c = free[idx]
    x = c + rng.uniform(0.0, 1.0, ())
    y = r + rng.uniform(0.0, 1.0, ())
    theta = wrap_angle(rng.uniform(-math.pi, math.pi, ()))
    return Pose(float(x), float(y), float(theta))


def step_robot(maze, pose, rng, max_heading_tries=100, motion_noise=MOTION_NOISE):
    """Move forward d = 0.2 + U[-0.02, 0.02]; when the forward segment
    would cross an obstacle, sample fresh uniform headings until a
    collision-free one is found. Returns (new pose, (d, dtheta)) with
    the executed values."""
    d = STEP_DISTANCE
    if motion_noise > 0.0:
        d += float(rng.uniform(-motion_noise, motion_noise, ()))
    theta = pose.theta
    if segment_blocked(maze.cells, pose.x, pose.y, theta, d):
        for _ in range(max_heading_tries):
            theta = wrap_angle(float(rng.uniform(-math.pi, math.pi, ())))
            if not segment_blocked(maze.cells, pose.x, pose.y, theta, d):
                break
        else:
            raise RuntimeError("no collision-free heading found; malformed map")
    new_pose = Pose(pose.x + d * math.cos(theta),
                    pose.y + d * math.sin(theta),
                    theta)
    dtheta = wrap_angle(theta - pose.theta)
    return new_pose, (d, dtheta)


def observe(maze, pose, rng=None):
    """Distances to the 5 nearest landmarks, ascending, plus U[-0.1, 0.1]
    noise per reading (clipped at 0). rng=None gives noiseless readings."""
    if maze.landmarks.shape[0] < N_OBSERVED_LANDMARKS:
        raise ValueError("map has fewer than 5 landmarks")
    diff = maze.landmarks - np.array([pose.x, pose.y])
    dists = np.sqrt((diff * diff).sum(axis=1))
    nearest = np.sort(dists)[:N_OBSERVED_LANDMARKS]
    if rng is None:
        return nearest
    noisy = nearest + rng.uniform(-OBS_NOISE, OBS_NOISE, (N_OBSERVED_LANDMARKS,))
    return np.maximum(noisy, 0.0)


def simulate_trajectory(maze, n_steps, rng, motion_noise=MOTION_NOISE,
                        obs_noise=True):
    """One rollout: poses (T+1), executed actions (T), observations (T).

    obs[t] is taken at poses[t+1]; actions[t] moved poses[t] to
    poses[t+1]. Model input t pairs actions[t] with obs[t]."""
    pose = random_free_pose(maze, rng)
    poses = [pose]
    actions = []
    observations = []
    for _ in range(n_steps):
        pose, action = step_robot(maze, pose, rng, motion_noise=motion_noise)
        poses.append(pose)
        actions.append(action)
        observations.append(observe(maze, pose, rng if obs_noise else None))
    return {
        "poses": np.array(poses, dtype=np.float64),
        "actions": np.array(actions, dtype=np.float64),
        "obs": np.array(observations, dtype=np.float64),
    }


# ---------------------------------------------------------------------------
# dataset files


def _traj_seed(base_seed, split_index, traj_index):
    ss = np.random.SeedSequence(entropy=base_seed,
                                spawn_key=(split_index, traj_index))
    return int(ss.generate_state(1)[0])


def generate_dataset(maze, out_dir, counts, n_steps, seed):
    """Write train/val/test JSONL splits plus metadata.json.

    counts: mapping split name -> trajectory count. Each trajectory uses
    its own derived stream, so the output is a pure function of
    (map, counts, n_steps, seed).
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split_index, (split, count) in enumerate(sorted(counts.items())):
        path = os.path.join(out_dir, f"{split}.jsonl")
        with open(path, "w") as fh:
            for i in range(count):
                rng = RngStream(_traj_seed(seed, split_index, i))
                traj = simulate_trajectory(maze, n_steps, rng)
                fh.write(json.dumps({
                    "poses": traj["poses"].tolist(),
                    "actions": traj["actions"].tolist(),
                    "obs": traj["obs"].tolist(),
                }) + "\n")
        paths[split] = path
    meta = {
        "n": maze.n,
        "grid": maze.grid_strings(),
        "landmarks": maze.landmarks.tolist(),
        "map_seed": maze.seed,
        "data_seed": seed,
        "n_steps": n_steps,
        "counts": {k: int(v) for k, v in counts.items()},
    }
    meta_path = os.path.join(out_dir, "metadata.json")
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    paths["metadata"] = meta_path
    return paths


def load_metadata(data_dir):
    with open(os.path.join(data_dir, "metadata.json")) as fh:
        meta = json.load(fh)
    maze = MazeMap.from_grid_strings(meta["grid"], seed=meta.get("map_seed", 0))
    return maze, meta


def load_trajectories(data_dir, split):
    path = os.path.join(data_dir, f"{split}.jsonl")
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append({
                "poses": np.asarray(rec["poses"], dtype=np.float64),
                "actions": np.asarray(rec["actions"], dtype=np.float64),
                "obs": np.asarray(rec["obs"], dtype=np.float64),
            })
    if not out:
        raise ValueError(f"empty dataset split: {path}")
    return out


def encode_inputs(actions, obs, n):
    """Model inputs (T, 8): [d, cos dtheta, sin dtheta, 5 obs / n]."""
    d = actions[:, 0:1]
    dtheta = actions[:, 1]
    return np.concatenate(
        [d, np.cos(dtheta)[:, None], np.sin(dtheta)[:, None], obs / n], axis=1)


def encode_targets(poses, n):
    """Targets (T, 4) for poses[1:]: [x/n, y/n, cos theta, sin theta]."""
    later = poses[1:]
    return np.stack([later[:, 0] / n, later[:, 1] / n,
                     np.cos(later[:, 2]), np.sin(later[:, 2])], axis=1)


def decode_position(target_row, n):
    """Map a 4-dim target back to (x, y) map coordinates."""
    return target_row[0] * n, target_row[1] * n


# ---------------------------------------------------------------------------
# bootstrap particle filter oracle


def _nearest_dists_multi(landmarks, xs, ys):
    """(P,) poses -> (P, 5) noiseless sorted nearest-landmark distances."""
    diff_x = xs[:, None] - landmarks[None, :, 0]
    diff_y = ys[:, None] - landmarks[None, :, 1]
    dists = np.sqrt(diff_x * diff_x + diff_y * diff_y)
    k = N_OBSERVED_LANDMARKS
    part = np.partition(dists, k - 1, axis=1)[:, :k]
    part.sort(axis=1)
    return part


def _blocked_multi(cells, xs, ys, thetas, dists, n_samples=6):
    """Approximate per-particle collision test: sample points along each
    segment and look up their cells. Fine for the oracle filter; the
    simulator itself uses the exact traversal."""
    n = cells.shape[0]
    frac = np.linspace(0.0, 1.0, n_samples + 1)[1:]
    steps = np.asarray(dists)[:, None] * frac
    px = xs[:, None] + np.cos(thetas)[:, None] * steps
    py = ys[:, None] + np.sin(thetas)[:, None] * steps
    cx = np.clip(px.astype(np.int64), 0, n - 1)
    cy = np.clip(py.astype(np.int64), 0, n - 1)
    return (cells[cy, cx] != FREE).any(axis=1)


def _uniform_free_particles(maze, k, rng):
    free = maze.free_cells()
    idx = rng.integers(0, len(free), (k,))
    xs = free[idx, 1] + rng.uniform(0.0, 1.0, (k,))
    ys = free[idx, 0] + rng.uniform(0.0, 1.0, (k,))
    thetas = rng.uniform(-math.pi, math.pi, (k,))
    return xs, ys, thetas


_UNDERFLOW_LOG = -700.0  # below this, exp() of the total weight hits 0.0
_LOST_LOGLIK = -15.0  # best per-step log-likelihood of a locked-on cloud
_LOST_WINDOW = 3  # consecutive bad steps before declaring the track lost
_ANNEAL_HEADING = 1.5  # roughening right after (re)initialization ...
_ANNEAL_POSITION = 0.5
_ANNEAL_DECAY = 0.75  # ... decaying per step toward the floor
_ROUGHEN_HEADING = 0.03
_ROUGHEN_POSITION = 0.01


def bootstrap_pf(maze, actions, observations, k, seed, init_pose=None,
                 obs_sigma=OBS_NOISE / math.sqrt(3.0),
                 motion_noise=MOTION_NOISE):
    """Classical particle filter with the true simulator models.

    The transition re-samples the step-length noise per particle;
    particles whose move would cross an obstacle stay put and are
    heavily down-weighted (the recorded trajectory never collided).
    Observation likelihood is a Gaussian with sigma matched to the
    uniform noise's standard deviation. Multinomial resampling triggers
    at ESS < K/2 and preserves the total weight.

    Localizing from a uniform prior against this sharply peaked range
    likelihood needs two classical aids, both disabled in the
    zero-noise mode (motion_noise=0):

    * roughening: particles get heading/position jitter, large right
      after a (re)initialization and annealed down to a small floor, so
      the resample loop can zoom onto a mode from a wide basin;
    * recovery: when no particle explains the observation for a few
      consecutive steps (or the total weight underflows outright), the
      belief is re-initialized uniformly over free space (logged) and
      the filter re-acquires.

    Returns {"means": (T, 3) weighted-mean poses, "reinit_steps": [...]}.
    """
    rng = RngStream(seed)
    actions = np.asarray(actions, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    n_steps = actions.shape[0]
    n = maze.cells.shape[0]
    if init_pose is not None:
        xs = np.full(k, float(init_pose[0]))
        ys = np.full(k, float(init_pose[1]))
        thetas = np.full(k, float(init_pose[2]))
    else:
        xs, ys, thetas = _uniform_free_particles(maze, k, rng)
    log_w = np.full(k, -math.log(k))
    means = np.zeros((n_steps, 3))
    reinit_steps = []
    age = 0
    bad_run = 0

    for t in range(n_steps):
        d, dtheta = actions[t]
        thetas = thetas + dtheta
        dd = np.full(k, d)
        if motion_noise > 0.0:
            sig_h = max(_ROUGHEN_HEADING, _ANNEAL_HEADING * _ANNEAL_DECAY ** age)
            sig_p = max(_ROUGHEN_POSITION, _ANNEAL_POSITION * _ANNEAL_DECAY ** age)
            thetas = thetas + sig_h * rng.gaussian((k,))
            dd = dd + rng.uniform(-motion_noise, motion_noise, (k,))
        age += 1
        blocked = _blocked_multi(maze.cells, xs, ys, thetas, dd)
        move = ~blocked
        new_x = xs + np.where(move, dd * np.cos(thetas), 0.0)
        new_y = ys + np.where(move, dd * np.sin(thetas), 0.0)
        if motion_noise > 0.0:
            new_x = new_x + sig_p * rng.gaussian((k,))
            new_y = new_y + sig_p * rng.gaussian((k,))
            # drop jitter that lands inside an obstacle
            cx = np.clip(new_x.astype(np.int64), 0, n - 1)
            cy = np.clip(new_y.astype(np.int64), 0, n - 1)
            in_wall = maze.cells[cy, cx] != FREE
            new_x = np.where(in_wall, xs, new_x)
            new_y = np.where(in_wall, ys, new_y)
        xs, ys = new_x, new_y

        increment = -20.0 * blocked
        expected = _nearest_dists_multi(maze.landmarks, xs, ys)
        err = expected - observations[t]
        increment = increment - 0.5 * (err * err).sum(axis=1) / (obs_sigma * obs_sigma)
        log_w = log_w + increment
        if motion_noise > 0.0 and increment.max() < _LOST_LOGLIK:
            bad_run += 1
        else:
            bad_run = 0

        shift = log_w.max()
        if np.isfinite(shift):
            total = shift + math.log(np.exp(log_w - shift).sum())
        else:
            total = -math.inf
        if total < _UNDERFLOW_LOG or bad_run >= _LOST_WINDOW:
            log.warning("belief no longer explains observations at step %d; "
                        "re-initializing uniformly over free space", t)
            reinit_steps.append(t)
            xs, ys, thetas = _uniform_free_particles(maze, k, rng)
            log_w = np.full(k, -math.log(k))
            total = 0.0
            age = 0
            bad_run = 0
        w = np.exp(log_w - log_w.max())
        w /= w.sum()

        means[t, 0] = (w * xs).sum()
        means[t, 1] = (w * ys).sum()
        means[t, 2] = math.atan2((w * np.sin(thetas)).sum(),
                                 (w * np.cos(thetas)).sum())

        ess = 1.0 / ((w * w).sum())
        if ess < k / 2.0 and k > 1:
            cdf = np.cumsum(w)
            cdf[-1] = 1.0
            u = rng.uniform(0.0, 1.0, (k,))
            idx = np.searchsorted(cdf, u, side="right")
            xs, ys, thetas = xs[idx], ys[idx], thetas[idx]
            log_w = np.full(k, total - math.log(k))

    return {"means": means, "reinit_steps": reinit_steps}
