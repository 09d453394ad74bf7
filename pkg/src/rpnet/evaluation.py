"""Episodic N-way K-shot evaluation.

A *scorer* is any callable ``scorer(queries, exemplars) -> scores`` taking
two equally-shaped image batches and returning one similarity per row,
higher meaning more similar.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, sample_episode
from .exceptions import EvaluationError
from .models import SAME, SimilarityModel


@dataclass
class EvalConfig:
    n_way: int = 20
    k_shot: int = 1
    num_tests: int = 200
    runs_per_test: int = 20
    seed: int = 0
    aggregate: str = "mean"

    def validate(self, n_classes=None):
        for name in ("n_way", "k_shot", "num_tests", "runs_per_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.aggregate not in ("mean", "max"):
            raise ValueError(f"aggregate must be 'mean' or 'max', got {self.aggregate!r}")
        if n_classes is not None and self.n_way > n_classes:
            raise ValueError(f"{self.n_way}-way needs at least {self.n_way} test classes, "
                             f"have {n_classes}")
        return self

    @classmethod
    def omniglot_reference(cls, seed=0):
        return cls(n_way=20, k_shot=1, num_tests=200, runs_per_test=20, seed=seed)

    @classmethod
    def mini_imagenet_reference(cls, k_shot=1, seed=0):
        return cls(n_way=5, k_shot=k_shot, num_tests=100, runs_per_test=100, seed=seed)


@dataclass
class EvalReport:
    accuracy: float
    episodes: int
    correct: int
    total: int
    ci95: tuple
    config: dict = field(default_factory=dict)
    per_episode: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        d["ci95"] = tuple(d["ci95"])
        return cls(**d)


def normal_ci95(p: float, n: int) -> tuple:
    half = 1.96 * math.sqrt(p * (1 - p) / n)
    return (max(0.0, p - half), min(1.0, p + half))


# ---------------------------------------------------------------- scorers

def pixel_distance_scorer(x, x_t):
    """Negative Euclidean distance over raw pixels."""
    x, x_t = np.asarray(x, dtype=np.float64), np.asarray(x_t, dtype=np.float64)
    if x.shape != x_t.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_t.shape}")
    if x.ndim == 3:
        return -float(np.sqrt(((x - x_t) ** 2).sum()))
    return -np.sqrt(((x - x_t) ** 2).reshape(len(x), -1).sum(axis=1))


def model_scorer(model: SimilarityModel, chunk: int = 512):
    """Wrap a similarity model as a scorer in inference mode.

    The query is passed as ``x`` and the support exemplar as ``x_t``. A
    3-output discriminator scores with ``log p_same``.
    """
    param = next(model.parameters())

    def score(queries, exemplars):
        single = np.ndim(queries) == 3
        q = np.asarray(queries)[None] if single else np.asarray(queries)
        e = np.asarray(exemplars)[None] if single else np.asarray(exemplars)
        was_training = model.training
        model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(q), chunk):
                a = torch.as_tensor(q[i:i + chunk], dtype=param.dtype, device=param.device)
                b = torch.as_tensor(e[i:i + chunk], dtype=param.dtype, device=param.device)
                s = model(a, b)
                if model.n_outputs != 1:
                    s = torch.log_softmax(s, dim=-1)[:, SAME]
                out.append(s.cpu().numpy().astype(np.float64))
        model.train(was_training)
        scores = np.concatenate(out)
        return float(scores[0]) if single else scores

    return score


# ---------------------------------------------------------------- protocol

def _class_scores(scores, labels, aggregate):
    classes = np.unique(labels)  # sorted ascending
    agg = np.max if aggregate == "max" else np.mean
    return classes, np.array([agg(scores[labels == c]) for c in classes])


def predict(scorer, support, support_labels, x_q, aggregate="mean"):
    """Class of the best-matching support class for one query.

    With one exemplar per class this is the argmax over exemplars; with
    several, per-class scores are averaged (or maxed). Ties go to the
    lowest class id.
    """
    support = np.asarray(support)
    labels = np.asarray(support_labels)
    if len(support) == 0:
        raise ValueError("support set is empty")
    queries = np.repeat(np.asarray(x_q)[None], len(support), axis=0)
    scores = np.asarray(scorer(queries, support), dtype=np.float64)
    _check_scores(scores, labels)
    classes, agg = _class_scores(scores, labels, aggregate)
    return int(classes[int(np.argmax(agg))])


def _check_scores(scores, labels, query=None):
    bad = np.flatnonzero(~np.isfinite(scores))
    if len(bad):
        where = f" for query {query}" if query is not None else ""
        raise EvaluationError(f"scorer returned {scores[bad[0]]} against support "
                              f"exemplar {bad[0]} (class {labels[bad[0]]}){where}")


def evaluate_episode(scorer, episode, aggregate="mean") -> np.ndarray:
    """Per-query correctness for one episode, scoring all query/exemplar pairs in one batch."""
    n_s, n_q = len(episode.support), len(episode.queries)
    queries = np.repeat(episode.queries, n_s, axis=0)
    exemplars = np.tile(episode.support, (n_q, 1, 1, 1))
    scores = np.asarray(scorer(queries, exemplars), dtype=np.float64).reshape(n_q, n_s)
    correct = np.zeros(n_q, dtype=bool)
    for j in range(n_q):
        _check_scores(scores[j], episode.support_labels, query=j)
        classes, agg = _class_scores(scores[j], episode.support_labels, aggregate)
        correct[j] = classes[int(np.argmax(agg))] == episode.query_labels[j]
    return correct


def run_protocol(scorer, dataset: Dataset, test_classes, cfg: EvalConfig,
                 keep_log: bool = True) -> EvalReport:
    """``num_tests`` support sets, each probed with ``runs_per_test`` queries.

    Episode ``i`` is sampled from ``default_rng(seed + i)`` so episodes are
    independent and reproducible.
    """
    test_classes = sorted(int(c) for c in test_classes)
    cfg.validate(len(test_classes))
    correct, log = 0, []
    for i in range(cfg.num_tests):
        rng = np.random.default_rng(cfg.seed + i)
        ep = sample_episode(dataset, test_classes, cfg.n_way, cfg.k_shot,
                            cfg.runs_per_test, rng)
        hits = evaluate_episode(scorer, ep, cfg.aggregate)
        correct += int(hits.sum())
        if keep_log:
            log.append("".join("1" if h else "0" for h in hits))
    total = cfg.num_tests * cfg.runs_per_test
    acc = correct / total
    return EvalReport(acc, cfg.num_tests, correct, total, normal_ci95(acc, total),
                      asdict(cfg), log)
