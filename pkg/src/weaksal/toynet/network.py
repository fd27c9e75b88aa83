"""Multi-scale fully convolutional network with a shared backbone.

Each scale replica resizes the input, zero-pads it to a multiple of the
feature stride and runs the same conv stack down to 1/8 resolution. A 1x1
head gives two channels (background, foreground) per scale; their logit
differences are upsampled to the input size, summed and squashed. All
replicas' features are resampled to the full-scale 1/8 grid and stacked;
global average pooling plus a linear layer give class scores, and the same
linear weights applied per cell give class activation maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from weaksal.errors import ShapeError
from weaksal.imagecore import Image, SaliencyMap, bilinear_matrix, minmax_normalize
from weaksal.toynet.config import BACKBONE_STRIDES, NetConfig
from weaksal.toynet.params import NetParams, backbone_names

PROB_CLIP = 1e-12


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def padded_size(n: int, stride: int) -> int:
    return max(stride, -(-n // stride) * stride)


# --- layers ------------------------------------------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """x (C, H, W), w (O, C, 3, 3), padding 1. Returns output and im2col buffer."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * 9, ho * wo)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], ho, wo), cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape, stride: int):
    o, ho, wo = dout.shape
    d2 = dout.reshape(o, ho * wo)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(o, -1).T @ d2).reshape(x_shape[0], 3, 3, ho, wo)
    c, h, wd = x_shape
    dxp = np.zeros((c, h + 2, wd + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, di, dj]
    return dxp[:, 1:-1, 1:-1], dw, db


def resize_chw(x: np.ndarray, ry: np.ndarray, rx: np.ndarray) -> np.ndarray:
    return np.matmul(np.matmul(ry, x), rx.T)


# --- forward -------------------------------------------------------------------

@dataclass
class ScaleCache:
    size: tuple[int, int]
    acts: list                  # post-ReLU activations, acts[0] is the padded input
    cols: list
    feature: np.ndarray         # (C, gh, gw)
    logit: np.ndarray           # (gh, gw)
    up_y: np.ndarray            # upsampling matrices for the logit map
    up_x: np.ndarray
    grid_y: np.ndarray          # resampling onto the full-scale feature grid
    grid_x: np.ndarray


@dataclass
class ForwardOutputs:
    per_scale_maps: list[np.ndarray]      # (2, gh, gw) per scale: background, foreground
    fused_logit: np.ndarray               # (H, W)
    fused_prob: SaliencyMap
    class_scores: np.ndarray              # (n_classes,)
    concat_features: np.ndarray           # (K, Gh, Gw)
    image_shape: tuple[int, int]
    _caches: list[ScaleCache] = field(default_factory=list, repr=False)
    _pooled: np.ndarray | None = field(default=None, repr=False)


def image_tensor(image: Image) -> np.ndarray:
    """(3, H, W) float input centred on zero."""
    return image.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0 - 0.5


def _as64(params: NetParams) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}


def forward(image: Image, params: NetParams, cfg: NetConfig,
            replicas: list[dict[str, np.ndarray]] | None = None) -> ForwardOutputs:
    """Run the network.

    ``replicas`` optionally gives each scale its own backbone tensors (for
    checking that shared weights receive the sum of per-scale gradients).
    """
    cfg.validate()
    params.check(cfg)
    if replicas is not None and len(replicas) != len(cfg.scales):
        raise ShapeError("need one backbone replica per scale")
    p = _as64(params)
    h, w = image.shape
    stride = cfg.feature_stride
    gh_full, gw_full = padded_size(h, stride) // stride, padded_size(w, stride) // stride
    x_full = image_tensor(image)
    caches, maps, feats = [], [], []
    fused = np.zeros((h, w))
    for k, s in enumerate(cfg.scales):
        bb = p if replicas is None else {n: np.asarray(v, dtype=np.float64) for n, v in replicas[k].items()}
        hs, ws = scaled_size(h, s), scaled_size(w, s)
        x = resize_chw(x_full, bilinear_matrix(h, hs), bilinear_matrix(w, ws))
        x = np.pad(x, ((0, 0), (0, padded_size(hs, stride) - hs), (0, padded_size(ws, stride) - ws)))
        acts, cols = [x], []
        for i, st in enumerate(BACKBONE_STRIDES):
            z, c = conv3x3_forward(acts[-1], bb[f"conv{i}.weight"], bb[f"conv{i}.bias"], st)
            acts.append(np.maximum(z, 0.0))
            cols.append(c)
        feat = acts[-1]
        gh, gw = feat.shape[1:]
        m = np.einsum("oc,cij->oij", p["sal.weight"], feat) + p["sal.bias"][:, None, None]
        logit = m[1] - m[0]
        # the unpadded scaled image spans hs/stride feature cells
        up_y = bilinear_matrix(gh, h, extent=hs / stride)
        up_x = bilinear_matrix(gw, w, extent=ws / stride)
        fused += up_y @ logit @ up_x.T
        grid_y = bilinear_matrix(gh, gh_full, extent=gh_full * hs / h)
        grid_x = bilinear_matrix(gw, gw_full, extent=gw_full * ws / w)
        feats.append(resize_chw(feat, grid_y, grid_x))
        maps.append(m)
        caches.append(ScaleCache((hs, ws), acts, cols, feat, logit, up_y, up_x, grid_y, grid_x))
    f = np.concatenate(feats, axis=0)
    pooled = f.mean(axis=(1, 2))
    scores = p["cls.weight"] @ pooled + p["cls.bias"]
    # keep the probability strictly inside (0, 1) even for saturated logits
    prob = np.clip(sigmoid(fused), PROB_CLIP, 1.0 - PROB_CLIP)
    return ForwardOutputs(maps, fused, SaliencyMap(prob), scores, f, (h, w), caches, pooled)


# --- backward ------------------------------------------------------------------

@dataclass
class Gradients:
    total: NetParams
    per_scale_backbone: list[dict[str, np.ndarray]]


def backward(out: ForwardOutputs, params: NetParams, cfg: NetConfig, d_logit: np.ndarray | None,
             d_scores: np.ndarray | None, scores_reach_backbone: bool = True,
             replicas: list[dict[str, np.ndarray]] | None = None) -> Gradients:
    """Gradients of a loss given its derivative w.r.t. the fused logit map
    (H, W) and/or the class scores.

    With ``scores_reach_backbone`` False the class-score gradient stops at
    the classification layer, so the backbone and saliency head learn only
    from the saliency term.
    """
    p = _as64(params)
    grads = params.zeros_like()
    per_scale = []
    d_feat_cls = [None] * len(cfg.scales)
    if d_scores is not None:
        d_scores = np.asarray(d_scores, dtype=np.float64)
        grads["cls.weight"] += np.outer(d_scores, out._pooled)
        grads["cls.bias"] += d_scores
        if scores_reach_backbone:
            gh, gw = out.concat_features.shape[1:]
            d_pooled = p["cls.weight"].T @ d_scores
            d_f = np.broadcast_to((d_pooled / (gh * gw))[:, None, None], out.concat_features.shape)
            c_last = cfg.backbone_channels[-1]
            for k, cache in enumerate(out._caches):
                d_fk = d_f[k * c_last:(k + 1) * c_last]
                d_feat_cls[k] = resize_chw(d_fk, cache.grid_y.T, cache.grid_x.T)
    for k, cache in enumerate(out._caches):
        bb = p if replicas is None else {n: np.asarray(v, dtype=np.float64) for n, v in replicas[k].items()}
        d_feat = np.zeros_like(cache.feature)
        if d_logit is not None:
            dl = cache.up_y.T @ d_logit @ cache.up_x
            dm = np.stack([-dl, dl])
            grads["sal.weight"] += np.einsum("oij,cij->oc", dm, cache.feature)
            grads["sal.bias"] += dm.sum(axis=(1, 2))
            d_feat += np.einsum("oc,oij->cij", p["sal.weight"], dm)
        if d_feat_cls[k] is not None:
            d_feat += d_feat_cls[k]
        g_scale = {}
        d_act = d_feat
        for i in range(len(BACKBONE_STRIDES) - 1, -1, -1):
            dz = d_act * (cache.acts[i + 1] > 0)
            d_act, dw, db = conv3x3_backward(dz, cache.cols[i], bb[f"conv{i}.weight"],
                                             cache.acts[i].shape, BACKBONE_STRIDES[i])
            g_scale[f"conv{i}.weight"] = dw
            g_scale[f"conv{i}.bias"] = db
        for name in backbone_names(cfg):
            grads[name] += g_scale[name]
        per_scale.append(g_scale)
    return Gradients(grads, per_scale)


# --- class activation maps -------------------------------------------------------

def raw_cam(outputs: ForwardOutputs, params: NetParams, c: int) -> np.ndarray:
    """sum_k w_k^c f_k on the 1/8 feature grid."""
    w = np.asarray(params["cls.weight"], dtype=np.float64)
    if not 0 <= c < w.shape[0]:
        raise IndexError(f"class {c} out of range 0..{w.shape[0] - 1}")
    return np.einsum("k,kij->ij", w[c], outputs.concat_features)


def compute_cam(outputs: ForwardOutputs, params: NetParams, c: int, stride: int = 8) -> SaliencyMap:
    """Class activation map at input resolution, min-max normalised."""
    cam = raw_cam(outputs, params, c)
    h, w = outputs.image_shape
    up = bilinear_matrix(cam.shape[0], h, extent=h / stride) @ cam @ bilinear_matrix(cam.shape[1], w, extent=w / stride).T
    return SaliencyMap(minmax_normalize(up))


def top_classes(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k highest scores; ties go to the lower index."""
    scores = np.asarray(scores)
    if not 1 <= k <= len(scores):
        raise IndexError(f"k = {k} outside 1..{len(scores)}")
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def top_k_cam_mean(outputs: ForwardOutputs, params: NetParams, k: int, stride: int = 8) -> SaliencyMap:
    cams = [compute_cam(outputs, params, c, stride).values for c in top_classes(outputs.class_scores, k)]
    return SaliencyMap(np.clip(np.mean(cams, axis=0), 0.0, 1.0))
