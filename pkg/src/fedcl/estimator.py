"""scikit-learn style front end: partition ``(X, y)`` over simulated clients and train."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .channel import transmit_rows
from .config import ExperimentConfig
from .data import ConfigError, Dataset, PartitionSpec, partition_mwayqshot
from .models import decoder_forward, encoder_forward
from .numerics import log_softmax
from .protocol import EVAL, evaluate, run_training, stream


class FedCLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Federated split-learning classifier trained on a simulated wireless network.

    ``fit`` deals the samples out to ``clients`` simulated devices as an
    m-way q-shot partition, then trains personalised encoders and a shared
    decoder for ``rounds`` rounds. With ``q=None`` the largest shot count the
    data supports is used.

    Predictions need a client: each one owns a personal encoder. Features
    cross the uplink channel on the way to the decoder, with a fixed noise
    stream so repeated calls agree.

    Parameters mirror :class:`fedcl.config.ExperimentConfig`.
    """

    def __init__(self, scheme="fedcl", clients=5, rounds=200, m=2, q=None, batch_size=32,
                 local_iters=1, scg_iters=1, lam=1.0, lr=1e-3, snr_db=10.0, fading="none",
                 feature_dim=64, encoder_hidden=((64,),), decoder_hidden=(64,), scg_hidden=64,
                 centroid_rms=3.0, seed=0, n_jobs=1):
        self.scheme = scheme
        self.clients = clients
        self.rounds = rounds
        self.m = m
        self.q = q
        self.batch_size = batch_size
        self.local_iters = local_iters
        self.scg_iters = scg_iters
        self.lam = lam
        self.lr = lr
        self.snr_db = snr_db
        self.fading = fading
        self.feature_dim = feature_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.scg_hidden = scg_hidden
        self.centroid_rms = centroid_rms
        self.seed = seed
        self.n_jobs = n_jobs

    def _config(self, num_classes, input_dim, q):
        return ExperimentConfig(
            scheme=self.scheme, clients=self.clients, rounds=self.rounds, num_classes=num_classes,
            m=self.m, q=q, batch_size=self.batch_size, local_iters=self.local_iters,
            scg_iters=self.scg_iters, lam=self.lam, lr=self.lr, client_lrs=(self.lr,),
            snr_db=self.snr_db, fading=self.fading, input_dim=input_dim,
            feature_dim=self.feature_dim, encoder_hidden=tuple(map(tuple, self.encoder_hidden)),
            decoder_hidden=tuple(self.decoder_hidden), scg_hidden=self.scg_hidden,
            centroid_rms=self.centroid_rms, seed=self.seed, dataset="array")

    def _largest_q(self, ds: Dataset) -> int:
        counts = np.bincount(ds.y, minlength=ds.num_classes)
        holders = math.ceil(self.clients * self.m / ds.num_classes)
        for q in range(int(counts.min()) // max(holders, 1), 0, -1):
            try:
                partition_mwayqshot(ds, PartitionSpec(self.clients, self.m, q, self.seed))
                return q
            except ConfigError:
                continue
        raise ConfigError("too few samples per class for this many clients")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need samples from at least two classes")
        self.n_features_in_ = X.shape[1]
        ds = Dataset(X, codes, self.classes_.size)
        q = self.q if self.q is not None else self._largest_q(ds)
        config = self._config(self.classes_.size, X.shape[1], q)
        result = run_training(config, train=ds, threads=self.n_jobs)
        self.config_ = config
        self.history_ = result.metrics
        self.clients_ = result.clients
        self.server_ = result.server
        return self

    def _check(self, X, client):
        check_is_fitted(self, "server_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fit with {self.n_features_in_}")
        if not 0 <= client < len(self.clients_):
            raise ValueError(f"client must lie in [0, {len(self.clients_)}), got {client}")
        return X

    def transform(self, X, client=0):
        """Clean encoder features of ``client``, before the channel."""
        X = self._check(X, client)
        return encoder_forward(X, self.clients_[client].encoder)

    def _logits(self, X, client):
        feats = self.transform(X, client)
        uplink, _ = self.config_.channels()
        received = transmit_rows(feats, uplink, stream(self.seed, EVAL, client))
        return decoder_forward(received, self.server_.decoder)

    def predict_log_proba(self, X, client=0):
        return log_softmax(self._logits(X, client))

    def predict_proba(self, X, client=0):
        return np.exp(self.predict_log_proba(X, client))

    def predict(self, X, client=0):
        logits = self._logits(X, client)
        return self.classes_[np.argmax(logits, axis=1)]

    def score_clients(self, X, y):
        """Accuracy of every client on the samples of the classes it trained on."""
        check_is_fitted(self, "server_")
        X, y = check_X_y(X, y, dtype=np.float64)
        known = np.isin(y, self.classes_)
        codes = np.searchsorted(self.classes_, y[known])
        test = Dataset(X[known], codes, self.classes_.size)
        uplink, _ = self.config_.channels()
        accs, _ = evaluate(self.clients_, self.server_, test, uplink, self.seed)
        return accs
