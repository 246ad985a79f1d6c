"""scikit-learn style wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, validate_data

from .exceptions import StructureError
from .hadamard import DEFAULT_K_MAX, HadamardConfig, apply_block_hadamard, block_size_errors, candidate_ks
from .lsq import cold_start_step, lsq_quantize
from .tensor import QuantizedTensor


class HadamardQuantizer(TransformerMixin, BaseEstimator):
    """INT4 Hadamard quantizer for a feature matrix.

    ``fit`` picks the block exponent with the smallest reconstruction error
    (unless ``k`` is given) and sets the step with the cold-start rule.
    ``transform`` returns the dequantized reconstruction in the original
    basis; ``quantize`` returns the packed INT4 levels of ``X H``.
    """

    def __init__(self, k=None, k_max=DEFAULT_K_MAX):
        self.k = k
        self.k_max = k_max

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        d = X.shape[1]
        if self.k is None:
            # the block-size criterion is a product of two errors; squaring one is monotone
            errors = block_size_errors(X, X, k_max=self.k_max)
            self.k_ = min(sorted(errors), key=errors.__getitem__)
        else:
            if self.k not in candidate_ks(d, max(self.k, 0)):
                raise StructureError(f"k={self.k} does not divide {d} features into 2^k blocks")
            self.k_ = int(self.k)
        self.hadamard_ = HadamardConfig(self.k_, d)
        self.step_ = cold_start_step(apply_block_hadamard(X, self.hadamard_))
        return self

    def _checked(self, X):
        check_is_fitted(self, "step_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def quantize(self, X) -> QuantizedTensor:
        X = self._checked(X)
        q, _ = lsq_quantize(apply_block_hadamard(X, self.hadamard_), self.step_)
        return q

    def transform(self, X):
        q = self.quantize(X)
        return apply_block_hadamard(q.scale * q.levels.astype(np.float64), self.hadamard_)

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error."""
        X = self._checked(X)
        return -float(np.mean((self.transform(X) - X) ** 2))


class QuantizedMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP whose hidden layers run through the simulated INT4 kernels.

    Trained with plain SGD for ``steps`` minibatch steps.  Until
    ``cold_start_steps`` have passed, every forward pass (including
    ``predict``) re-derives the step sizes from its own batch.
    """

    def __init__(self, hidden=64, layers=2, mode="hq+lss", steps=500, lr=0.05, batch=16,
                 k_max=DEFAULT_K_MAX, cold_start_steps=50, lss_mode="bernoulli", random_state=0):
        self.hidden = hidden
        self.layers = layers
        self.mode = mode
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.k_max = k_max
        self.cold_start_steps = cold_start_steps
        self.lss_mode = lss_mode
        self.random_state = random_state

    def fit(self, X, y):
        # harness imports stay local: the harness depends on this package, not the reverse
        from .harness.config import RunConfig
        from .harness.tasks import SyntheticTask
        from .harness.train import train

        X, y = validate_data(self, X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        batch = min(self.batch, X.shape[0])
        cfg = RunConfig(
            model="mlp", layers=self.layers, hidden=self.hidden, seq_len=1, batch=batch,
            steps=self.steps, lr=self.lr, seed=self.random_state, mode=self.mode, k_max=self.k_max,
            cold_start_steps=self.cold_start_steps, lss_mode=self.lss_mode,
            train_size=batch, features=X.shape[1], classes=max(len(self.classes_), 2),
            generator="outlier-activation",  # only sizes are read; the task comes from X
        )
        task = SyntheticTask("user", X[:, None, :], codes, cfg.classes)
        res = train(cfg, task)
        if res.diverged:
            raise FloatingPointError("training diverged; lower lr")
        self.model_ = res.model
        self.loss_curve_ = [float(r[1]) for r in res.rows]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        outs = [self.model_.forward(X[i:i + self.batch, None, :])[0] for i in range(0, X.shape[0], self.batch)]
        scores = np.concatenate(outs)[:, : len(self.classes_)]
        # binary problems report a single margin, as scikit-learn expects
        return scores[:, 1] - scores[:, 0] if len(self.classes_) == 2 else scores

    def predict(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            return self.classes_[(scores > 0).astype(int)]
        return self.classes_[np.argmax(scores, axis=1)]
