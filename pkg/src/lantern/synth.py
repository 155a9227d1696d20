"""Synthetic adaptive-survey populations and their on-disk format.

Generative story: each user has a latent trait vector ``z``.  Survey features
are a noisy linear view of ``z``; a fraction of the external features is
another noisy linear view, the rest is pure noise.  Every response key has a
linear score ``w_k . z + b_k`` that decides favourability.  Questions are
served independently per user, rare (conditionally served) questions with a
much lower probability.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

QUESTION_TYPES = ("binary", "single_choice", "multi_choice")


class DatasetError(ValueError):
    """A dataset file is malformed or violates a structural invariant."""


@dataclass(frozen=True)
class ResponseKey:
    key_id: int
    question_id: int
    question_type: str
    serve_probability: float


@dataclass
class DatasetManifest:
    survey_dim: int
    external_dim: int
    keys: list[ResponseKey]
    generator_seed: int = 0
    cycle_id: int = 0

    @property
    def n_keys(self) -> int:
        return len(self.keys)

    def questions(self) -> dict[int, list[ResponseKey]]:
        """Keys grouped by question id, in key order."""
        out: dict[int, list[ResponseKey]] = {}
        for key in self.keys:
            out.setdefault(key.question_id, []).append(key)
        return out

    def validate(self) -> None:
        if self.survey_dim < 1 or self.external_dim < 1:
            raise DatasetError("invariant positive_dims violated: survey_dim and external_dim must be >= 1")
        if not self.keys:
            raise DatasetError("invariant nonempty_keys violated: manifest has no response keys")
        if [k.key_id for k in self.keys] != list(range(len(self.keys))):
            raise DatasetError("invariant dense_key_ids violated: key ids must be 0..d_s-1 in order")
        for qid, keys in self.questions().items():
            qtype = keys[0].question_type
            if qtype not in QUESTION_TYPES:
                raise DatasetError(f"invariant question_type violated: {qtype!r} for question {qid}")
            if any(k.question_type != qtype or k.serve_probability != keys[0].serve_probability for k in keys):
                raise DatasetError(f"invariant question_consistency violated: question {qid} mixes types or serve rates")
            if qtype == "binary" and len(keys) != 1:
                raise DatasetError(f"invariant binary_single_key violated: question {qid} has {len(keys)} keys")
            if qtype != "binary" and len(keys) < 2:
                raise DatasetError(f"invariant choice_min_keys violated: question {qid} has {len(keys)} key")
            if not 0.0 < keys[0].serve_probability <= 1.0:
                raise DatasetError(f"invariant serve_probability violated: question {qid}")


@dataclass(eq=False)
class UserRecord:
    user_id: int
    x_s: np.ndarray
    x_e: np.ndarray
    mask: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, UserRecord):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and np.array_equal(self.x_s, other.x_s)
            and np.array_equal(self.x_e, other.x_e)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic population.

    ``survey_latent_coverage`` is the fraction of latent traits that the survey
    features observe; the rest are visible only through informative external
    features.  ``rare_key_survey_focus`` moves the weight of rare keys onto
    the survey-visible traits (0 leaves them like any other key, 1 makes them
    fully survey-determined).  Rare keys draw their favourable rate from
    ``[rare_min_favorable_rate, max_favorable_rate]``: a conditionally served
    question mostly reaches users it applies to.
    """

    n_users: int = 5000
    latent_dim: int = 16
    n_keys: int = 200
    binary_fraction: float = 0.3
    single_fraction: float = 0.4
    max_options: int = 5
    survey_dim: int = 32
    external_dim: int = 32
    survey_noise_sigma: float = 0.5
    external_noise_sigma: float = 1.0
    external_informative_fraction: float = 0.5
    survey_latent_coverage: float = 1.0
    serve_probability: float = 0.9
    rare_serve_probability: float = 0.1
    rare_key_fraction: float = 0.2
    rare_key_survey_focus: float = 0.0
    min_favorable_rate: float = 0.05
    max_favorable_rate: float = 0.5
    rare_min_favorable_rate: float = 0.05
    seed: int = 0
    cycle_id: int = 0

    def validate(self) -> None:
        for name in ("n_users", "latent_dim", "n_keys", "survey_dim", "external_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_options < 2:
            raise ValueError(f"max_options must be >= 2, got {self.max_options}")
        for name in ("binary_fraction", "single_fraction", "external_informative_fraction",
                     "survey_latent_coverage", "rare_key_fraction", "rare_key_survey_focus"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.binary_fraction + self.single_fraction > 1.0:
            raise ValueError("binary_fraction + single_fraction must not exceed 1")
        for name in ("serve_probability", "rare_serve_probability"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("survey_noise_sigma", "external_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.min_favorable_rate <= self.max_favorable_rate < 1.0:
            raise ValueError("favorable rates must satisfy 0 < min <= max < 1")
        if not 0.0 < self.rare_min_favorable_rate <= self.max_favorable_rate:
            raise ValueError("rare_min_favorable_rate must lie in (0, max_favorable_rate]")
        if self.n_visible_latents < 1:
            raise ValueError("survey_latent_coverage leaves the survey with no latent traits")

    @property
    def n_visible_latents(self) -> int:
        return int(round(self.survey_latent_coverage * self.latent_dim))


@dataclass
class _Structure:
    """Population-level draws shared by every user."""

    manifest: DatasetManifest
    questions: list[tuple[str, list[int]]]
    survey_loading: np.ndarray
    external_loading: np.ndarray
    n_informative: int
    key_weights: np.ndarray
    key_bias: np.ndarray


def _build_questions(cfg: GeneratorConfig, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Question (type, option count) list whose key counts add up to ``n_keys`` exactly."""
    questions = []
    remaining = cfg.n_keys
    probs = [cfg.binary_fraction, cfg.single_fraction, 1.0 - cfg.binary_fraction - cfg.single_fraction]
    while remaining > 0:
        qtype = QUESTION_TYPES[rng.choice(3, p=probs)]
        size = 1 if qtype == "binary" else int(rng.integers(2, cfg.max_options + 1))
        if remaining == 1:
            qtype, size = "binary", 1
        size = min(size, remaining)
        questions.append((qtype, size))
        remaining -= size
    return questions


def _structure(cfg: GeneratorConfig) -> _Structure:
    rng = np.random.default_rng([cfg.seed, 0])
    L, visible = cfg.latent_dim, cfg.n_visible_latents
    layout = _build_questions(cfg, rng)

    # mark questions as rare until the requested share of keys is reached
    n_rare_target = int(round(cfg.rare_key_fraction * cfg.n_keys))
    rare_q: set[int] = set()
    rare_keys = 0
    for qi in rng.permutation(len(layout)):
        if rare_keys >= n_rare_target:
            break
        rare_q.add(int(qi))
        rare_keys += layout[qi][1]

    keys: list[ResponseKey] = []
    questions: list[tuple[str, list[int]]] = []
    for qi, (qtype, size) in enumerate(layout):
        p = cfg.rare_serve_probability if qi in rare_q else cfg.serve_probability
        ids = list(range(len(keys), len(keys) + size))
        keys.extend(ResponseKey(k, qi, qtype, p) for k in ids)
        questions.append((qtype, ids))
    manifest = DatasetManifest(cfg.survey_dim, cfg.external_dim, keys, cfg.seed, cfg.cycle_id)

    survey_loading = np.zeros((cfg.survey_dim, L))
    survey_loading[:, :visible] = rng.normal(0.0, 1.0 / math.sqrt(visible), size=(cfg.survey_dim, visible))
    n_inf = int(round(cfg.external_informative_fraction * cfg.external_dim))
    external_loading = rng.normal(0.0, 1.0 / math.sqrt(L), size=(n_inf, L))

    weights = rng.normal(0.0, 1.0, size=(cfg.n_keys, L))
    hidden = np.ones(L)
    hidden[:visible] = 0.0
    for qi in rare_q:
        for k in questions[qi][1]:
            weights[k] *= 1.0 - cfg.rare_key_survey_focus * hidden
    norms = np.linalg.norm(weights, axis=1)
    rates = rng.uniform(cfg.min_favorable_rate, cfg.max_favorable_rate, size=cfg.n_keys)
    rare_ids = [k for qi in sorted(rare_q) for k in questions[qi][1]]
    rates[rare_ids] = rng.uniform(cfg.rare_min_favorable_rate, cfg.max_favorable_rate, size=len(rare_ids))
    # P(w.z + b > 0) = rate for z ~ N(0, I)
    bias = norms * np.array([NormalDist().inv_cdf(r) for r in rates])
    return _Structure(manifest, questions, survey_loading, external_loading, n_inf, weights, bias)


def _user_draws(cfg: GeneratorConfig, st: _Structure, user_id: int):
    # each user's randomness comes from (seed, user_id) alone, so order does not matter
    rng = np.random.default_rng([cfg.seed, 1, user_id])
    z = rng.standard_normal(cfg.latent_dim)
    eps_s = rng.standard_normal(cfg.survey_dim)
    eps_e = rng.standard_normal(cfg.external_dim)
    serve = rng.random(len(st.questions))
    return z, eps_s, eps_e, serve


def generate_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, list[UserRecord]]:
    """Draw a population; deterministic in ``cfg`` and independent of user order."""
    cfg.validate()
    st = _structure(cfg)
    draws = [_user_draws(cfg, st, uid) for uid in range(cfg.n_users)]
    Z, eps_s, eps_e, serve = (np.stack(d) for d in zip(*draws))

    x_s = Z @ st.survey_loading.T + cfg.survey_noise_sigma * eps_s
    n_inf = st.n_informative
    x_e = np.empty((cfg.n_users, cfg.external_dim))
    x_e[:, :n_inf] = Z @ st.external_loading.T + cfg.external_noise_sigma * eps_e[:, :n_inf]
    x_e[:, n_inf:] = math.sqrt(1.0 + cfg.external_noise_sigma**2) * eps_e[:, n_inf:]

    scores = Z @ st.key_weights.T + st.key_bias
    mask = np.zeros((cfg.n_users, cfg.n_keys), dtype=np.int8)
    for qi, (qtype, ids) in enumerate(st.questions):
        served = serve[:, qi] < st.manifest.keys[ids[0]].serve_probability
        if qtype == "single_choice":
            block = np.full((cfg.n_users, len(ids)), -1, dtype=np.int8)
            block[np.arange(cfg.n_users), np.argmax(scores[:, ids], axis=1)] = 1
        else:
            block = np.where(scores[:, ids] > 0, 1, -1).astype(np.int8)
        mask[:, ids] = np.where(served[:, None], block, 0)

    records = [UserRecord(uid, x_s[uid].copy(), x_e[uid].copy(), mask[uid].copy()) for uid in range(cfg.n_users)]
    return st.manifest, records


def stack(records: Sequence[UserRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Records as ``(X_s, X_e, M)`` arrays."""
    if not records:
        raise DatasetError("no records to stack")
    return (
        np.stack([r.x_s for r in records]),
        np.stack([r.x_e for r in records]),
        np.stack([r.mask for r in records]),
    )


# ---------------------------------------------------------------------------
# persistence


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "survey_dim": manifest.survey_dim,
        "external_dim": manifest.external_dim,
        "cycle_id": manifest.cycle_id,
        "generator_seed": manifest.generator_seed,
        "keys": [asdict(k) for k in manifest.keys],
    }


def manifest_from_dict(obj: dict) -> DatasetManifest:
    try:
        keys = [
            ResponseKey(int(k["key_id"]), int(k["question_id"]), str(k["question_type"]), float(k["serve_probability"]))
            for k in obj["keys"]
        ]
        manifest = DatasetManifest(
            int(obj["survey_dim"]), int(obj["external_dim"]), keys, int(obj["generator_seed"]), int(obj["cycle_id"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest: {exc!r}") from exc
    manifest.validate()
    return manifest


def record_line(r: UserRecord) -> str:
    obj = {
        "user_id": int(r.user_id),
        "x_s": [float(v) for v in r.x_s],
        "x_e": [float(v) for v in r.x_e],
        "mask": [int(v) for v in r.mask],
    }
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(manifest: DatasetManifest, records: Iterable[UserRecord], path: str | os.PathLike) -> None:
    """Write ``manifest.json`` and ``records.jsonl`` under directory ``path``."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest_to_dict(manifest), fh, indent=2)
            fh.write("\n")
        with open(root / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                fh.write(record_line(r))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"could not write dataset to {root}: {exc}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{p}: invalid JSON: {exc}") from exc
    return manifest_from_dict(obj)


def validate_record(r: UserRecord, manifest: DatasetManifest, questions=None) -> None:
    """Raise :class:`DatasetError` naming the first violated record invariant."""
    if r.x_s.shape != (manifest.survey_dim,):
        raise DatasetError(f"invariant x_s_length violated: expected F_s={manifest.survey_dim}, got {r.x_s.size}")
    if r.x_e.shape != (manifest.external_dim,):
        raise DatasetError(f"invariant x_e_length violated: expected F_e={manifest.external_dim}, got {r.x_e.size}")
    if r.mask.shape != (manifest.n_keys,):
        raise DatasetError(f"invariant mask_length violated: expected d_s={manifest.n_keys}, got {r.mask.size}")
    if not np.isin(r.mask, (-1, 0, 1)).all():
        raise DatasetError("invariant mask_values violated: mask entries must be -1, 0 or 1")
    if not (np.isfinite(r.x_s).all() and np.isfinite(r.x_e).all()):
        raise DatasetError("invariant finite_features violated")
    for qid, keys in (questions or manifest.questions()).items():
        vals = r.mask[[k.key_id for k in keys]]
        served = vals != 0
        if served.any() and not served.all():
            raise DatasetError(f"invariant question_served_whole violated: question {qid} is partly served")
        if served.all() and keys[0].question_type == "single_choice" and int((vals == 1).sum()) != 1:
            raise DatasetError(f"invariant single_choice_one_positive violated: question {qid}")


def load_dataset(path: str | os.PathLike) -> tuple[DatasetManifest, list[UserRecord]]:
    root = Path(path)
    manifest = load_manifest(root / "manifest.json")
    questions = manifest.questions()
    records: list[UserRecord] = []
    with open(root / "records.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                r = UserRecord(
                    int(obj["user_id"]),
                    np.asarray(obj["x_s"], dtype=np.float64),
                    np.asarray(obj["x_e"], dtype=np.float64),
                    np.asarray(obj["mask"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"records.jsonl line {lineno}: malformed record ({exc})") from exc
            try:
                validate_record(r, manifest, questions)
            except DatasetError as exc:
                raise DatasetError(f"records.jsonl line {lineno}: {exc}") from exc
            r.mask = r.mask.astype(np.int8)
            records.append(r)
    return manifest, records


# ---------------------------------------------------------------------------
# key statistics and label-space drift


def key_counts(masks: np.ndarray, count: str = "served") -> np.ndarray:
    """Per-key response counts: ``served`` counts mask != 0, ``favorable`` counts mask == +1."""
    masks = np.asarray(masks)
    if count == "served":
        return (masks != 0).sum(axis=0)
    if count == "favorable":
        return (masks == 1).sum(axis=0)
    raise ValueError(f"unknown count definition {count!r}")


def frequency_buckets(records_or_masks, k: int, count: str = "served") -> tuple[set[int], set[int]]:
    """The ``k`` least and ``k`` most responded keys.

    Keys are ordered by (count, key_id); rare takes the head of that order and
    frequent the tail, so ties resolve deterministically.
    """
    if isinstance(records_or_masks, np.ndarray):
        masks = records_or_masks
    else:
        masks = np.stack([r.mask for r in records_or_masks])
    counts = key_counts(masks, count)
    d = counts.size
    if k < 0 or 2 * k > d:
        raise ValueError(f"need 2k <= d_s, got k={k} with d_s={d}")
    order = np.lexsort((np.arange(d), counts))
    rare = {int(i) for i in order[:k]}
    frequent = {int(i) for i in order[d - k:]} if k else set()
    return rare, frequent


@dataclass
class LabelSpaceDiff:
    added: set[tuple[int, int]] = field(default_factory=set)
    removed: set[tuple[int, int]] = field(default_factory=set)
    retained: set[tuple[int, int]] = field(default_factory=set)

    @property
    def misaligned(self) -> bool:
        return bool(self.added or self.removed)

    def report(self) -> str:
        lines = [
            f"retained keys: {len(self.retained)}",
            f"added keys:    {len(self.added)}",
        ]
        lines += [f"  + question {q} option {pos}" for q, pos in sorted(self.added)]
        lines.append(f"removed keys:  {len(self.removed)}")
        lines += [f"  - question {q} option {pos}" for q, pos in sorted(self.removed)]
        if self.misaligned:
            lines.append("status: MISALIGNED - output head must be retrained for the new label space")
        else:
            lines.append("status: aligned")
        return "\n".join(lines) + "\n"


def key_identities(manifest: DatasetManifest) -> set[tuple[int, int]]:
    """Stable ``(question_id, position within question)`` identity of every key."""
    return {(qid, pos) for qid, keys in manifest.questions().items() for pos in range(len(keys))}


def label_space_diff(a: DatasetManifest, b: DatasetManifest) -> LabelSpaceDiff:
    ka, kb = key_identities(a), key_identities(b)
    return LabelSpaceDiff(added=kb - ka, removed=ka - kb, retained=ka & kb)
