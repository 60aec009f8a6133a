"""Equal-weight probability averaging over heterogeneous members."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EnsembleError(ValueError):
    pass


def class_rows(model, X) -> np.ndarray:
    """Two-column class-probability rows for any supported model kind."""
    return model.predict_proba_rows(X)


@dataclass
class EnsembleModel:
    members: list
    kind: str = field(default="ensemble", init=False)

    def __post_init__(self):
        if not self.members:
            raise EnsembleError("an ensemble needs at least one member")
        widths = {m.n_features for m in self.members}
        if len(widths) != 1:
            raise EnsembleError(f"members disagree on feature width: {sorted(widths)}")

    @property
    def n_features(self) -> int:
        return self.members[0].n_features

    def predict_proba_rows(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise EnsembleError(f"expected input with {self.n_features} columns, got shape {X.shape}")
        rows = np.stack([class_rows(m, X) for m in self.members])
        # sorting across members makes the float sum independent of member order
        return np.sort(rows, axis=0).sum(axis=0) / len(self.members)

    predict_proba = predict_proba_rows


def predict_proba(ens: EnsembleModel, X) -> np.ndarray:
    return ens.predict_proba_rows(X)
