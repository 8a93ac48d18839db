"""Plain-text artifact formats: model checkpoints, episode records, run summaries.

Each file starts with a ``# schema: <kind> v<N>`` line and readers refuse
any other kind or version. Floats are written with 17 significant digits,
which round-trips IEEE doubles exactly.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .dynamics import NU, NX, QuadParams
from .ensemble import EnsembleModel
from .mlp import Mlp, param_count

CHECKPOINT_KIND = "knode-checkpoint"
CHECKPOINT_VERSION = 1
EPISODE_KIND = "episode-record"
EPISODE_VERSION = 1
SUMMARY_KIND = "episode-summary"
SUMMARY_VERSION = 1
_VALUES_PER_LINE = 8

EPISODE_COLUMNS = (
    ["t"]
    + [f"x{i}" for i in range(NX)]
    + [f"ref{i}" for i in range(NX)]
    + [f"u{i}" for i in range(NU)]
    + ["iterations", "converged", "version"]
)


class ArtifactError(ValueError):
    """Artifact file that cannot be parsed or has an unsupported version."""


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def schema_line(kind: str, version: int) -> str:
    return f"# schema: {kind} v{version}"


def check_schema(line: str, kind: str, version: int, path="<text>"):
    expected = schema_line(kind, version)
    if line.rstrip("\n") != expected:
        prefix = f"# schema: {kind} v"
        if line.startswith(prefix):
            raise ArtifactError(f"{path}: unsupported {kind} version {line[len(prefix):].strip()!r}")
        raise ArtifactError(f"{path}: expected header {expected!r}, found {line.strip()[:60]!r}")


def _atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- checkpoints -------------------------------------------------------------


def dumps_checkpoint(model: EnsembleModel) -> str:
    p = model.params
    lines = [
        schema_line(CHECKPOINT_KIND, CHECKPOINT_VERSION),
        f"capacity {model.capacity}",
        f"version {model.version}",
        "layer_dims " + " ".join(str(d) for d in model.layer_dims),
        f"mass {fmt(p.mass)}",
        "inertia " + " ".join(fmt(v) for v in np.asarray(p.inertia).ravel()),
        "gravity " + " ".join(fmt(v) for v in p.gravity),
        f"thrust_max {fmt(p.thrust_max)}",
        f"torque_max {fmt(p.torque_max)}",
        f"members {len(model.members)}",
    ]
    for net, age in zip(model.members, model.ages):
        lines.append(f"member age {age} n_params {net.n_params}")
        vals = net.params
        for k in range(0, vals.size, _VALUES_PER_LINE):
            lines.append(" ".join(fmt(v) for v in vals[k : k + _VALUES_PER_LINE]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def _expect(lines, i, key, path):
    if i >= len(lines):
        raise ArtifactError(f"{path}: truncated before '{key}'")
    parts = lines[i].split()
    if not parts or parts[0] != key:
        raise ArtifactError(f"{path}: line {i + 1}: expected '{key}', found {lines[i][:60]!r}")
    return parts[1:]


def _floats(tokens, path, line_no):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ArtifactError(f"{path}: line {line_no}: bad number ({exc})") from None


def loads_checkpoint(text: str, path="<text>") -> EnsembleModel:
    lines = text.splitlines()
    if not lines:
        raise ArtifactError(f"{path}: empty checkpoint")
    check_schema(lines[0], CHECKPOINT_KIND, CHECKPOINT_VERSION, path)
    try:
        capacity = int(_expect(lines, 1, "capacity", path)[0])
        version = int(_expect(lines, 2, "version", path)[0])
        dims = tuple(int(d) for d in _expect(lines, 3, "layer_dims", path))
        mass = _floats(_expect(lines, 4, "mass", path), path, 5)[0]
        inertia = np.array(_floats(_expect(lines, 5, "inertia", path), path, 6)).reshape(3, 3)
        gravity = tuple(_floats(_expect(lines, 6, "gravity", path), path, 7))
        thrust_max = _floats(_expect(lines, 7, "thrust_max", path), path, 8)[0]
        torque_max = _floats(_expect(lines, 8, "torque_max", path), path, 9)[0]
        n_members = int(_expect(lines, 9, "members", path)[0])
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ArtifactError):
            raise
        raise ArtifactError(f"{path}: malformed header ({exc})") from None
    if len(gravity) != 3:
        raise ArtifactError(f"{path}: gravity needs three components")
    if n_members > capacity:
        raise ArtifactError(f"{path}: {n_members} members exceed capacity {capacity}")
    expected_n = param_count(dims)
    i = 10
    members = []
    ages = []
    for k in range(n_members):
        head = _expect(lines, i, "member", path)
        if len(head) != 4 or head[0] != "age" or head[2] != "n_params":
            raise ArtifactError(f"{path}: line {i + 1}: malformed member header")
        ages.append(int(head[1]))
        n = int(head[3])
        if n != expected_n:
            raise ArtifactError(f"{path}: member {k} has {n} parameters, layer_dims {dims} need {expected_n}")
        i += 1
        vals = []
        while len(vals) < n:
            if i >= len(lines):
                raise ArtifactError(f"{path}: truncated inside member {k}")
            vals.extend(_floats(lines[i].split(), path, i + 1))
            i += 1
        if len(vals) != n:
            raise ArtifactError(f"{path}: member {k} has {len(vals)} values, expected {n}")
        members.append(Mlp(dims, np.array(vals)))
    if i >= len(lines) or lines[i].strip() != "end":
        raise ArtifactError(f"{path}: truncated (missing 'end' marker)")
    if ages != [n_members - 1 - k for k in range(n_members)]:
        raise ArtifactError(f"{path}: member ages {ages} are not oldest-first consecutive")
    params = QuadParams(mass=mass, inertia=inertia, gravity=gravity, thrust_max=thrust_max, torque_max=torque_max)
    return EnsembleModel(params, capacity, tuple(members), version, dims)


def save_checkpoint(model: EnsembleModel, path):
    _atomic_write(Path(path), dumps_checkpoint(model))


def load_checkpoint(path) -> EnsembleModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(text, path)


# -- episode records ---------------------------------------------------------


def episode_name(log) -> str:
    return f"{log.scenario.label}_{log.method}_seed{log.seed}"


def dumps_episode(log) -> str:
    """One whitespace-separated record per plant step, fixed column order."""
    head = [
        schema_line(EPISODE_KIND, EPISODE_VERSION),
        f"# method {log.method}",
        f"# scenario {log.scenario.label}",
        f"# seed {log.seed}",
        f"# fingerprint {log.fingerprint}",
        f"# failed {int(log.failed)}",
        " ".join(EPISODE_COLUMNS),
    ]
    rows = []
    for i in range(len(log)):
        vals = [fmt(log.t[i])]
        vals += [fmt(v) for v in log.states[i]]
        vals += [fmt(v) for v in log.refs[i]]
        vals += [fmt(v) for v in log.controls[i]]
        vals += [str(int(log.iterations[i])), str(int(log.converged[i])), str(int(log.versions[i]))]
        rows.append(" ".join(vals))
    return "\n".join(head + rows) + "\n"


def save_episode(log, path):
    _atomic_write(Path(path), dumps_episode(log))


def load_episode_columns(path) -> dict:
    """Read an episode record back as named column arrays."""
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ArtifactError(f"{path}: empty episode record")
    check_schema(lines[0], EPISODE_KIND, EPISODE_VERSION, path)
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        key, _, value = lines[i][2:].partition(" ")
        meta[key] = value
        i += 1
    if i >= len(lines) or lines[i].split() != EPISODE_COLUMNS:
        raise ArtifactError(f"{path}: missing or unexpected column header")
    body = [ln.split() for ln in lines[i + 1 :] if ln.strip()]
    if any(len(r) != len(EPISODE_COLUMNS) for r in body):
        raise ArtifactError(f"{path}: record with wrong number of columns")
    data = np.array(body, dtype=float).reshape(-1, len(EPISODE_COLUMNS))
    cols = {name: data[:, k] for k, name in enumerate(EPISODE_COLUMNS)}
    cols["meta"] = meta
    return cols


# -- run summaries -----------------------------------------------------------


def dumps_summary(summary: dict) -> str:
    return schema_line(SUMMARY_KIND, SUMMARY_VERSION) + "\n" + json.dumps(summary, indent=1, sort_keys=True) + "\n"


def save_summary(summary: dict, path):
    _atomic_write(Path(path), dumps_summary(summary))


def load_summary(path) -> dict:
    path = Path(path)
    text = path.read_text()
    first, _, body = text.partition("\n")
    check_schema(first, SUMMARY_KIND, SUMMARY_VERSION, path)
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: malformed summary ({exc})") from None
