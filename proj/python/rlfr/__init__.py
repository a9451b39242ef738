"""Python front end to the rlfr library.

Structured results come back from the extension as JSON text and are decoded
to plain dicts and lists here.
"""

import json as _json

from . import _core
from ._core import CheckFailure, ConfigError, DataError, adjusted_rand_index, best_of_n, fnv1a, kl_divergence, update_lambda

__all__ = [
    "CheckFailure",
    "ConfigError",
    "DataError",
    "adjusted_rand_index",
    "best_of_n",
    "correction_reward",
    "default_config",
    "derived_metrics",
    "evaluate_transcript",
    "fnv1a",
    "generate_completion",
    "kl_divergence",
    "match",
    "metrics_report",
    "resolve_config",
    "retraction_reward",
    "run_cli",
    "run_loop",
    "selfcheck",
    "update_lambda",
]


def _text(x):
    return x if isinstance(x, str) else _json.dumps(x)


def run_cli(*args):
    """Run one CLI command in-process. Returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])


def default_config():
    return _json.loads(_core.default_config())


def resolve_config(config):
    return _json.loads(_core.resolve_config(_text(config)))


def generate_completion(seed, config=None):
    return _json.loads(_core.generate_completion(seed, _text(config or {})))


def run_loop(seed, config=None):
    return _json.loads(_core.run_loop(seed, _text(config or {})))


def evaluate_transcript(transcript):
    return _json.loads(_core.evaluate_transcript(_text(transcript)))


def match(detections, ground_truth, verdicts):
    """Per-detection and per-hallucination correctness flags."""
    return _core.match([tuple(s) for s in detections], [tuple(s) for s in ground_truth], list(verdicts))


def metrics_report(counts):
    return _json.loads(_core.metrics_report(_text(counts)))


def derived_metrics(base_counts, rlfr_counts, run_counts):
    return _json.loads(_core.derived_metrics(_text(base_counts), _text(rlfr_counts), _text(run_counts)))


def correction_reward(fixed_prob, **gates):
    return _json.loads(_core.correction_reward(fixed_prob, **gates))


def retraction_reward(correct_retract_prob, lambda_, **gates):
    return _json.loads(_core.retraction_reward(correct_retract_prob, lambda_, **gates))


def selfcheck(seed=1):
    return _json.loads(_core.selfcheck(seed))
