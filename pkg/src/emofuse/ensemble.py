"""Hard-voting ensemble over trained checkpoints.

The class with strictly more votes than every other wins; when the top vote
count is shared (including the all-distinct case) the prediction of the
member with the highest validation macro F1 is used. Duplicate validation
F1s are rejected so that tie-break is always well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import Sample, fuse_modalities
from .errors import ConfigError
from .model import model_dims, model_forward
from .train import Metrics, confusion_matrix, metrics_from_confusion


@dataclass
class EnsembleMember:
    name: str
    params: dict[str, np.ndarray]
    val_f1: float


def _same_params(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def validate_members(members: list[EnsembleMember]) -> None:
    """Enforce odd M >= 3, distinct validation F1s, compatible dimensions.

    Equal F1s are allowed only between bit-identical parameter sets (copies
    of one checkpoint always vote together, so the tie-break stays
    unambiguous); distinct models sharing an F1 are rejected.
    """
    m = len(members)
    if m < 3 or m % 2 == 0:
        raise ConfigError(f"ensemble needs an odd number of members >= 3, got {m}")
    for i in range(m):
        for j in range(i + 1, m):
            if members[i].val_f1 == members[j].val_f1 and not _same_params(members[i].params, members[j].params):
                raise ConfigError(
                    f"members {members[i].name!r} and {members[j].name!r} have equal validation F1; tie-break undefined"
                )
    dims = {model_dims(mem.params)[0] for mem in members}
    classes = {model_dims(mem.params)[3] for mem in members}
    if len(dims) != 1 or len(classes) != 1:
        raise ConfigError("members disagree on feature dimension or class count")


def hard_vote(predictions: list[int], members: list[EnsembleMember]) -> int:
    """Majority vote with the highest-validation-F1 member breaking ties."""
    if len(predictions) != len(members):
        raise ConfigError(f"{len(predictions)} predictions for {len(members)} members")
    counts: dict[int, int] = {}
    for p in predictions:
        counts[p] = counts.get(p, 0) + 1
    top = max(counts.values())
    leaders = [cls for cls, c in counts.items() if c == top]
    if len(leaders) == 1:
        return leaders[0]
    best = max(range(len(members)), key=lambda i: members[i].val_f1)
    return predictions[best]


def member_predictions(members: list[EnsembleMember], sample: Sample) -> list[int]:
    h = fuse_modalities(sample.speech, sample.text)
    preds = []
    for mem in members:
        logits, _ = model_forward(h, mem.params)
        preds.append(int(np.argmax(logits)))
    return preds


def ensemble_evaluate(members: list[EnsembleMember], samples: list[Sample]) -> Metrics:
    """Score the hard-voted predictions over a dataset."""
    validate_members(members)
    n_classes = model_dims(members[0].params)[3]
    preds = [hard_vote(member_predictions(members, s), members) for s in samples]
    cm = confusion_matrix([s.label for s in samples], preds, n_classes)
    return metrics_from_confusion(cm)
