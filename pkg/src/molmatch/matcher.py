"""Per-layer attention matching of query molecules against a support set.

Every encoder layer yields support and query embeddings; the matcher
projects both, attends queries over the support rows and reads out a
label estimate as the attention-weighted mean of the support labels.
The per-layer estimates are fused by a learned affine map to two-class
probabilities.  Class index 0 is the positive class throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, GraphBatch, encode_multilevel
from .smiles import MolGraph
from .tensor import (
    Tensor,
    add,
    concat_cols,
    dropout,
    matmul,
    scale,
    softmax_rows,
    transpose,
)

__all__ = ["MatchParams", "LayerPrediction", "match_layer", "fuse", "predict", "predict_detailed"]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# Mean-pooled graph embeddings come out well below unit RMS, so unit-fan
# projections leave the scaled dot-product scores near zero and the
# attention indistinguishable from uniform.  The gain lifts initial score
# contrast to order one; validated on the synthetic end-to-end suite.
PROJECTION_GAIN = 8.0


@dataclass
class MatchParams:
    """Task-adaptable parameters (the w side of the model).

    ``wq``/``wk`` hold a single shared projection pair by default; with
    ``share_qk=False`` at init they hold one pair per encoder layer.
    ``bias`` can be frozen at zero to keep the fusion map strictly
    linear.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wo: Tensor  # [n_layers, 2]
    bias: Tensor  # [2]

    @property
    def n_layers(self) -> int:
        return self.wo.shape[0]

    @property
    def shared_qk(self) -> bool:
        return len(self.wq) == 1

    def qk(self, layer: int) -> tuple[Tensor, Tensor]:
        if self.shared_qk:
            return self.wq[0], self.wk[0]
        return self.wq[layer], self.wk[layer]

    @staticmethod
    def init(
        n_layers: int,
        hidden: int,
        seed=0,
        share_qk: bool = True,
        learn_bias: bool = True,
    ) -> "MatchParams":
        if n_layers < 1 or hidden < 1:
            raise ValueError("matcher needs n_layers >= 1 and hidden >= 1")
        rng = np.random.default_rng(seed)
        n_pairs = 1 if share_qk else n_layers
        wq = [
            Tensor(PROJECTION_GAIN * _uniform(rng, (hidden, hidden), hidden), requires_grad=True)
            for _ in range(n_pairs)
        ]
        wk = [
            Tensor(PROJECTION_GAIN * _uniform(rng, (hidden, hidden), hidden), requires_grad=True)
            for _ in range(n_pairs)
        ]
        # Vote-averaging start: each layer contributes +y_hat to the positive
        # logit and -y_hat to the negative one.  The bias centres the fused
        # logit difference at zero when every layer predicts 0.5; a frozen
        # bias stays at zero (strict affine-map-only mode).
        wo = Tensor(np.tile([1.0, -1.0], (n_layers, 1)), requires_grad=True)
        if learn_bias:
            bias = Tensor(np.array([-0.5 * n_layers, 0.5 * n_layers]), requires_grad=True)
        else:
            bias = Tensor(np.zeros(2), requires_grad=False)
        return MatchParams(wq=wq, wk=wk, wo=wo, bias=bias)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, t in enumerate(self.wq):
            out[f"wq{i}"] = t
        for i, t in enumerate(self.wk):
            out[f"wk{i}"] = t
        out["wo"] = self.wo
        out["bias"] = self.bias
        return out

    def replace_values(self, values: dict[str, np.ndarray], requires_grad: bool = True) -> "MatchParams":
        current = self.tensors()
        new = {}
        for name, t in current.items():
            v = values.get(name, t.values)
            new[name] = Tensor(np.asarray(v, dtype=np.float64).reshape(t.shape),
                               requires_grad=requires_grad and t.requires_grad)
        n_pairs = len(self.wq)
        return MatchParams(
            wq=[new[f"wq{i}"] for i in range(n_pairs)],
            wk=[new[f"wk{i}"] for i in range(n_pairs)],
            wo=new["wo"],
            bias=new["bias"],
        )

    def clone(self, requires_grad: bool = True) -> "MatchParams":
        return self.replace_values({}, requires_grad=requires_grad)

    def detach(self) -> "MatchParams":
        return MatchParams(
            wq=[t.detach() for t in self.wq],
            wk=[t.detach() for t in self.wk],
            wo=self.wo.detach(),
            bias=self.bias.detach(),
        )


@dataclass
class LayerPrediction:
    """One layer's attention matrix and label estimate for the queries."""

    y_hat: Tensor  # [n_query, 1], convex combination of support labels
    attention: Tensor  # [n_query, n_support], rows sum to 1


def match_layer(
    z_query: Tensor,
    z_support: Tensor,
    y_support: Tensor,
    params: MatchParams,
    layer: int,
    *,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LayerPrediction:
    """Scaled dot-product attention of queries over support labels."""
    if z_support.shape[0] == 0:
        raise ValueError("match_layer: empty support set")
    if z_query.shape[1] != z_support.shape[1]:
        raise ValueError(
            f"match_layer: query width {z_query.shape[1]} != support width {z_support.shape[1]}"
        )
    if y_support.shape != (z_support.shape[0], 1):
        raise ValueError(f"match_layer: y_support must be [{z_support.shape[0]}, 1]")
    wq, wk = params.qk(layer)
    d = z_query.shape[1]
    scores = scale(matmul(matmul(z_query, wq), transpose(matmul(z_support, wk))), 1.0 / math.sqrt(d))
    attention = softmax_rows(scores)
    used = attention
    if training and dropout_rate > 0.0:
        used = dropout(attention, dropout_rate, rng)
    y_hat = matmul(used, y_support)
    if used is attention:
        # A convex combination of the labels lies in their hull exactly,
        # but softmax rows only sum to 1 up to rounding, so the product
        # can spill one ulp past the boundary.  Snap it back.  Dropout
        # rescaling leaves the simplex, so the training path is exempt.
        np.clip(y_hat.values, y_support.values.min(), y_support.values.max(), out=y_hat.values)
    return LayerPrediction(y_hat=y_hat, attention=attention)


def fuse(
    layer_preds: list[LayerPrediction],
    params: MatchParams,
    *,
    training: bool = False,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Affine-combine the per-layer estimates into [n_query, 2] probabilities."""
    if len(layer_preds) != params.n_layers:
        raise ValueError(
            f"fuse: got {len(layer_preds)} layer predictions for {params.n_layers} fusion rows"
        )
    joint = concat_cols([lp.y_hat for lp in layer_preds])
    if training and dropout_rate > 0.0:
        joint = dropout(joint, dropout_rate, rng)
    logits = add(matmul(joint, params.wo), params.bias)
    return softmax_rows(logits)


def _labels_tensor(labels) -> Tensor:
    arr = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    return Tensor(arr)


def predict_detailed(
    support_graphs: list[MolGraph],
    support_labels,
    query_graphs: list[MolGraph],
    encoder_params: EncoderParams,
    match_params: MatchParams,
    *,
    training: bool = False,
    matcher_dropout: float = 0.0,
    encoder_dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[LayerPrediction]]:
    """Encode support and queries jointly, match at every layer, fuse.

    Returns the fused [n_query, 2] probabilities together with each
    layer's attention and label estimate.
    """
    if not support_graphs:
        raise ValueError("predict: empty support set")
    if not query_graphs:
        raise ValueError("predict: empty query set")
    n_s = len(support_graphs)
    levels = encode_multilevel(
        list(support_graphs) + list(query_graphs),
        encoder_params,
        training=training,
        dropout_rate=encoder_dropout,
        rng=rng,
    )
    y_s = _labels_tensor(support_labels)
    if y_s.shape[0] != n_s:
        raise ValueError(f"predict: {y_s.shape[0]} labels for {n_s} support graphs")
    preds = []
    for layer, z in enumerate(levels):
        z_s = gather_slice(z, 0, n_s)
        z_q = gather_slice(z, n_s, z.shape[0])
        preds.append(
            match_layer(
                z_q, z_s, y_s, match_params, layer,
                training=training, dropout_rate=matcher_dropout, rng=rng,
            )
        )
    probs = fuse(preds, match_params, training=training, dropout_rate=matcher_dropout, rng=rng)
    return probs, preds


def predict(
    support_graphs: list[MolGraph],
    support_labels,
    query_graphs: list[MolGraph],
    encoder_params: EncoderParams,
    match_params: MatchParams,
    **kwargs,
) -> Tensor:
    probs, _ = predict_detailed(
        support_graphs, support_labels, query_graphs, encoder_params, match_params, **kwargs
    )
    return probs


def gather_slice(t: Tensor, start: int, stop: int) -> Tensor:
    """Row slice as a differentiable gather."""
    from .tensor import gather_rows

    return gather_rows(t, np.arange(start, stop, dtype=np.int64))
