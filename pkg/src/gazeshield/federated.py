"""Simulated federated training: client partitioning, k-fold local training and FedAvg rounds."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import rng as rng_mod
from .preprocess import stratified_kfold

log = logging.getLogger(__name__)


class FederatedError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    X: np.ndarray
    y: np.ndarray  # label indices into the (dummy) label space
    indices: np.ndarray  # rows of the pooled matrix this client holds

    @property
    def size(self) -> int:
        return len(self.y)


def partition_clients(X, y, n_clients: int = 2, seed: int = 42) -> list[ClientDataset]:
    """Stratified near-equal split; per-class client counts differ by at most one."""
    if n_clients < 2:
        raise ValueError("need at least 2 clients")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    plan = stratified_kfold(y, k=n_clients, seed=seed, stream_name="clients")
    clients = []
    for cid, rows in enumerate(plan.folds):
        rows = np.array(rows, dtype=np.int64)
        clients.append(ClientDataset(cid, X[rows], y[rows], rows))
    return clients


@dataclass(frozen=True, eq=False)
class LocalResult:
    weights: nn.ModelWeights
    accuracy: float
    fold_accuracies: tuple[float, ...]
    best_fold: int
    histories: tuple[nn.TrainHistory, ...]
    used_global: bool


def _net_seed(seed: int) -> int:
    # every client and fold builds from the same initial parameters
    return rng_mod.derive_seed(seed, "model") % (2**63)


def initial_weights(input_dim: int, num_classes: int, seed: int, net_overrides: dict | None = None) -> nn.ModelWeights:
    return nn.get_weights(nn.build_model(input_dim, num_classes, _net_seed(seed), **(net_overrides or {})))


def local_train_kfold(client: ClientDataset, global_weights: nn.ModelWeights | None, n_folds: int = 3,
                      epochs: int = 25, seed: int = 42, num_classes: int | None = None, round_index: int = 1,
                      net_overrides: dict | None = None, train_overrides: dict | None = None) -> LocalResult:
    """Train one model per stratified fold and keep the one with the best validation accuracy.

    Each fold starts from ``global_weights`` when they fit the model and from
    scratch otherwise.  Randomness is keyed by (seed, round, fold), so two
    clients with identical data produce identical weights.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    C = int(num_classes if num_classes is not None else client.y.max() + 1)
    plan = stratified_kfold(client.y, k=n_folds, seed=rng_mod.derive_seed(seed, "folds", round_index) % (2**63))
    accs, weights, hists = [], [], []
    used_global = False
    for f in range(n_folds):
        tr, va = plan.split(f)
        model = nn.build_model(client.X.shape[1], C, _net_seed(seed), **(net_overrides or {}))
        if global_weights is not None:
            try:
                nn.set_weights(model, global_weights)
                used_global = True
            except nn.LayoutError:
                log.warning("client %d fold %d: global weights do not fit, training from scratch",
                            client.client_id, f)
        cfg = nn.TrainConfig(epochs=epochs, seed=rng_mod.derive_seed(seed, "train", round_index, f) % (2**63),
                             **(train_overrides or {}))
        hists.append(nn.train(model, client.X[tr], client.y[tr], client.X[va], client.y[va], cfg))
        accs.append(float(np.mean(nn.predict(model, client.X[va]) == client.y[va])))
        weights.append(nn.get_weights(model))
    best = int(np.argmax(accs))  # first maximum = lowest fold index
    return LocalResult(weights[best], accs[best], tuple(accs), best, tuple(hists), used_global)


def fedavg_coefficients(n_clients: int, sizes: Sequence[int] | None = None) -> np.ndarray:
    if n_clients < 1:
        raise ValueError("fedavg needs at least one client")
    if sizes is None:
        return np.full(n_clients, 1.0 / n_clients)
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) != n_clients or np.any(sizes <= 0):
        raise ValueError("sizes must give one positive count per client")
    return sizes / sizes.sum()


def _check_layouts(weights_list) -> None:
    first = weights_list[0].layout
    for w in weights_list[1:]:
        if w.layout != first:
            raise nn.LayoutError("client weight layouts differ")


def fedavg(weights_list: Sequence[nn.ModelWeights], sizes: Sequence[int] | None = None,
           mode: str = "weighted", base: nn.ModelWeights | None = None) -> nn.ModelWeights:
    """Aggregate client weights (BN running statistics included).

    ``weighted``: sum of c_s * w_s with c_s = n_s / sum(n) (uniform without
    sizes), computed as w_1 + sum c_s (w_s - w_1) so identical inputs come
    back bit-for-bit.  ``delta``: base + (1/S) sum (w_s - base), i.e. uniform
    averaging of the client updates relative to the broadcast weights.
    """
    if not weights_list:
        raise ValueError("fedavg of an empty list")
    _check_layouts(weights_list)
    S = len(weights_list)
    if mode == "weighted":
        c = fedavg_coefficients(S, sizes)
        anchor = weights_list[0].arrays
        out = []
        for i, a0 in enumerate(anchor):
            acc = np.zeros_like(a0)
            for cs, w in zip(c[1:], weights_list[1:]):
                acc += cs * (w.arrays[i] - a0)
            out.append(a0 + acc)
    elif mode == "delta":
        if base is None:
            raise ValueError("delta mode needs the broadcast (base) weights")
        _check_layouts([base, *weights_list])
        out = [b + sum(w.arrays[i] - b for w in weights_list) / S for i, b in enumerate(base.arrays)]
    else:
        raise ValueError(f"unknown fedavg mode {mode!r}")
    return nn.ModelWeights(weights_list[0].layout, tuple(out))


def fedavg_delta_form(base: nn.ModelWeights, weights_list, sizes=None) -> nn.ModelWeights:
    """base + sum c_s (w_s - base); equals the weighted mean when all clients started at base."""
    c = fedavg_coefficients(len(weights_list), sizes)
    out = [b + sum(cs * (w.arrays[i] - b) for cs, w in zip(c, weights_list)) for i, b in enumerate(base.arrays)]
    return nn.ModelWeights(base.layout, tuple(out))


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    client_val_accuracy: tuple[float, ...]
    client_sizes: tuple[int, ...]
    weights_sha256: str
    test_accuracy: float

    def to_dict(self) -> dict:
        return {"round": self.round_index, "client_val_accuracy": list(self.client_val_accuracy),
                "client_sizes": list(self.client_sizes), "weights_sha256": self.weights_sha256,
                "test_accuracy": self.test_accuracy}


@dataclass
class FederatedResult:
    records: list[RoundRecord] = field(default_factory=list)
    round_weights: list[nn.ModelWeights] = field(default_factory=list)
    final_model: nn.NeuralNetModel | None = None
    final_predictions: np.ndarray | None = None

    def progression_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = len(self.records[0].client_val_accuracy) if self.records else 0
        writer.writerow(["round", *[f"client_{i + 1}_val_acc" for i in range(n)], "global_test_acc"])
        for r in self.records:
            writer.writerow([r.round_index, *[repr(a) for a in r.client_val_accuracy], repr(r.test_accuracy)])
        return buf.getvalue()


def run_federated(clients: Sequence[ClientDataset], test_X, test_y, n_rounds: int = 5, n_folds: int = 3,
                  epochs: int = 25, seed: int = 42, num_classes: int | None = None, mode: str = "weighted",
                  net_overrides: dict | None = None, train_overrides: dict | None = None,
                  on_round: Callable[[RoundRecord, nn.ModelWeights], None] | None = None) -> FederatedResult:
    """Broadcast, train locally, aggregate by dataset size, evaluate; repeat for ``n_rounds``."""
    if len(clients) < 2:
        raise ValueError("need at least 2 clients")
    if n_rounds < 1:
        raise ValueError("n_rounds must be >= 1")
    test_X = np.asarray(test_X, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.int64)
    d = clients[0].X.shape[1]
    C = int(num_classes if num_classes is not None else
            max(int(c.y.max()) for c in clients) + 1)
    clients = sorted(clients, key=lambda c: c.client_id)
    result = FederatedResult()
    global_w: nn.ModelWeights | None = None
    for r in range(1, n_rounds + 1):
        base = global_w if global_w is not None else initial_weights(d, C, seed, net_overrides)
        local = []
        for c in clients:
            try:
                local.append(local_train_kfold(c, global_w, n_folds, epochs, seed, C, r, net_overrides,
                                               train_overrides))
            except Exception as exc:  # abort the round; no partial aggregation
                raise FederatedError(f"round {r}: client {c.client_id} failed: {exc}") from exc
        sizes = [c.size for c in clients]
        global_w = fedavg([lr.weights for lr in local], sizes, mode=mode, base=base)
        model = nn.build_model(d, C, _net_seed(seed), **(net_overrides or {}))
        nn.set_weights(model, global_w)
        preds = nn.predict(model, test_X)
        rec = RoundRecord(r, tuple(lr.accuracy for lr in local), tuple(sizes), global_w.sha256(),
                          float(np.mean(preds == test_y)))
        log.info("round %d: client val acc %s, global test acc %.4f", r, rec.client_val_accuracy, rec.test_accuracy)
        result.records.append(rec)
        result.round_weights.append(global_w)
        result.final_model, result.final_predictions = model, preds
        if on_round is not None:
            on_round(rec, global_w)
    return result
