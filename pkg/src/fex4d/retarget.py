"""Landmark-guided mesh retargeting.

A spiral-convolution encoder extracts per-vertex features ``Fe`` (coarse
level, d channels) from a neutral mesh M. The landmark displacement dL of a
frame queries ``Fe`` through a single-row cross-attention; a linear layer
maps the result to z_id, and the decoder turns

    z = lambda_theta * z_id + dL

into per-vertex displacements dM, so that M_f = M + dM.

The ``fusion="mean"`` ablation replaces the attention weights by uniform
ones (z_id is computed from the mean of the rows of Fe), leaving every
other layer unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatchError, DivergenceError, TopologyMismatchError, UntrainedModelError
from .mesh import MeshHierarchy, icosphere_hierarchy, vertex_normals

log = logging.getLogger(__name__)


def cross_attend(query: torch.Tensor, Fe: torch.Tensor, return_weights: bool = False):
    """softmax(q Fe^T / sqrt(d)) Fe for one query row (d,) or a batch (B, d).

    ``Fe`` is (V', d) or batched (B, V', d).
    """
    d = Fe.shape[-1]
    if query.shape[-1] != d:
        raise DimensionMismatchError(f"query dim {query.shape[-1]} != feature dim {d}")
    scores = (Fe @ query[..., :, None])[..., 0] / math.sqrt(d)
    w = torch.softmax(scores, dim=-1)
    out = (w[..., None, :] @ Fe)[..., 0, :]
    return (out, w) if return_weights else out


def fuse_latent(z_id, delta_L, lambda_theta):
    """z = lambda_theta * z_id + delta_L."""
    return lambda_theta * z_id + delta_L


class SpiralConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, spirals: np.ndarray):
        super().__init__()
        self.register_buffer("spirals", torch.as_tensor(spirals, dtype=torch.long), persistent=False)
        self.k = spirals.shape[1]
        self.lin = nn.Linear(c_in * self.k, c_out)

    def forward(self, x):  # (B, V, C)
        B, V, C = x.shape
        g = x[:, self.spirals.reshape(-1)].reshape(B, V, self.k * C)
        return self.lin(g)


@dataclass
class RetargetConfig:
    channels: tuple = (16, 32, 64, 128, 128)
    spiral_k: int = 9
    levels: int = 3
    n_landmarks: int = 68
    fusion: str = "attention"
    zero_init_output: bool = False
    coord_scale: float = 100.0   # mm per unit of network input
    disp_scale: float = 10.0     # mm per unit of network displacement

    @property
    def d(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)


# encoder resolution after each spiral layer: level index into the hierarchy
_ENC_LEVELS = (0, 1, 2, 2, 2)
_DEC_LEVELS = (2, 2, 1, 0, 0)


def _resample(x, src: int, dst: int, hierarchy_parents, sizes):
    """Move features between hierarchy levels: prefix decimation or midpoint upsampling."""
    while src < dst:
        src += 1
        x = x[:, :sizes[src]]
    while src > dst:
        p = hierarchy_parents[src - 1]
        x = torch.cat([x, 0.5 * (x[:, p[:, 0]] + x[:, p[:, 1]])], dim=1)
        src -= 1
    return x


class LandmarkRetargeter(nn.Module):
    def __init__(self, config: RetargetConfig, hierarchy: MeshHierarchy | None = None,
                 landmark_idx: np.ndarray | None = None):
        super().__init__()
        self.config = config
        h = hierarchy or icosphere_hierarchy(config.levels, config.spiral_k)
        self.sizes = h.sizes
        self.n_vertices = self.sizes[0]
        self.faces = h.faces[0]
        self.parents = [torch.as_tensor(p, dtype=torch.long) for p in h.parents]
        spir = [t.spirals for t in h.topologies]
        ch = (3,) + tuple(config.channels)
        self.enc = nn.ModuleList(SpiralConv(ch[i], ch[i + 1], spir[_ENC_LEVELS[i]]) for i in range(5))
        d, L = config.d, config.n_landmarks * 3
        self.query = nn.Linear(L, d)
        self.to_zid = nn.Linear(d, L)
        self.lambda_theta = nn.Parameter(torch.tensor(1.0))
        self.coarse = self.sizes[_DEC_LEVELS[0]]
        self.dec_in = nn.Linear(L, self.coarse * ch[-1])
        dch = tuple(reversed(ch[1:])) + (3,)
        self.dec = nn.ModuleList(SpiralConv(dch[i], dch[i + 1], spir[_DEC_LEVELS[i]]) for i in range(5))
        if config.zero_init_output:
            nn.init.zeros_(self.dec[-1].lin.weight)
            nn.init.zeros_(self.dec[-1].lin.bias)
        idx = landmark_idx if landmark_idx is not None else np.arange(config.n_landmarks)
        self.register_buffer("landmark_idx", torch.as_tensor(idx, dtype=torch.long))
        self.trained = False

    def encode(self, M: torch.Tensor) -> torch.Tensor:
        """Mesh features Fe, (B, V', d)."""
        x = M / self.config.coord_scale
        lvl = 0
        for conv, tgt in zip(self.enc, _ENC_LEVELS):
            x = _resample(x, lvl, tgt, self.parents, self.sizes)
            lvl = tgt
            x = F.elu(conv(x))
        return x

    def identity_code(self, Fe: torch.Tensor, dL: torch.Tensor) -> torch.Tensor:
        if self.config.fusion == "attention":
            ctx = cross_attend(self.query(dL), Fe)
        else:
            ctx = Fe.mean(dim=1)
        return self.to_zid(ctx)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x = self.dec_in(z).reshape(z.shape[0], self.coarse, -1)
        lvl = _DEC_LEVELS[0]
        for i, (conv, tgt) in enumerate(zip(self.dec, _DEC_LEVELS)):
            x = _resample(x, lvl, tgt, self.parents, self.sizes)
            lvl = tgt
            x = conv(x)
            if i < len(self.dec) - 1:
                x = F.elu(x)
        return x * self.config.disp_scale

    def forward(self, M: torch.Tensor, delta_L: torch.Tensor) -> torch.Tensor:
        """Predicted displacement dM (B, V, 3) for neutral meshes (B, V, 3) and dL (B, 68, 3), mm."""
        if M.shape[-2] != self.n_vertices:
            raise TopologyMismatchError(f"mesh has {M.shape[-2]} vertices, model expects {self.n_vertices}")
        dL = delta_L.reshape(delta_L.shape[0], -1) / self.config.disp_scale
        if dL.shape[1] != self.config.n_landmarks * 3:
            raise DimensionMismatchError(f"delta_L must hold {self.config.n_landmarks} landmarks")
        Fe = self.encode(M)
        z = fuse_latent(self.identity_code(Fe, dL), dL, self.lambda_theta)
        return self.decode(z)


@dataclass
class MeshState:
    M: np.ndarray
    delta_M: np.ndarray

    @property
    def M_f(self) -> np.ndarray:
        return self.M + self.delta_M


def _check_mesh(model: LandmarkRetargeter, M: np.ndarray):
    if not model.trained:
        raise UntrainedModelError("retargeter has not been trained")
    if M.shape != (model.n_vertices, 3):
        raise TopologyMismatchError(f"mesh shape {M.shape} does not match the training topology "
                                    f"({model.n_vertices}, 3)")


@torch.no_grad()
def retarget_frame(model: LandmarkRetargeter, M: np.ndarray, delta_L: np.ndarray) -> MeshState:
    M = np.asarray(M, dtype=np.float64)
    _check_mesh(model, M)
    dM = model(torch.as_tensor(M, dtype=torch.float32)[None],
               torch.as_tensor(np.asarray(delta_L), dtype=torch.float32)[None])[0]
    return MeshState(M, dM.double().numpy())


@torch.no_grad()
def retarget_sequence(model: LandmarkRetargeter, M: np.ndarray, landmarks: np.ndarray,
                      neutral: np.ndarray | None = None, batch_size: int = 64) -> list[MeshState]:
    """Frame-by-frame retargeting of an (F, 68, 3) landmark sequence.

    ``neutral`` defaults to the first frame of the sequence.
    """
    M = np.asarray(M, dtype=np.float64)
    _check_mesh(model, M)
    landmarks = np.asarray(landmarks, dtype=np.float64)
    neutral = landmarks[0] if neutral is None else np.asarray(neutral, dtype=np.float64)
    dL = torch.as_tensor(landmarks - neutral[None], dtype=torch.float32)
    Mt = torch.as_tensor(M, dtype=torch.float32)
    out = []
    for i in range(0, len(dL), batch_size):
        chunk = dL[i:i + batch_size]
        dM = model(Mt.expand(len(chunk), -1, -1), chunk)
        out += [MeshState(M, d.double().numpy()) for d in dM]
    return out


# ---------------------------------------------------------------------------
# synthetic mesh corpus


@dataclass
class MeshCorpus:
    """Neutral identities and (identity, dL, dM) expression samples, all in mm."""

    faces: np.ndarray
    landmark_idx: np.ndarray
    neutrals: np.ndarray       # (I, V, 3)
    identity: np.ndarray       # (S,) index into neutrals
    delta_L: np.ndarray        # (S, 68, 3)
    delta_M: np.ndarray        # (S, V, 3)

    def subset(self, identities) -> "MeshCorpus":
        keep = np.isin(self.identity, list(identities))
        return MeshCorpus(self.faces, self.landmark_idx, self.neutrals, self.identity[keep],
                          self.delta_L[keep], self.delta_M[keep])


def _front_landmarks(unit: np.ndarray, n: int) -> np.ndarray:
    """Deterministic farthest-point sample of ``n`` vertices on the front (+z) cap."""
    cand = np.flatnonzero(unit[:, 2] > 0.2)
    chosen = [cand[np.argmax(unit[cand, 2])]]
    d = np.linalg.norm(unit[cand] - unit[chosen[0]], axis=1)
    while len(chosen) < n:
        j = cand[np.argmax(d)]
        chosen.append(j)
        d = np.minimum(d, np.linalg.norm(unit[cand] - unit[j], axis=1))
    return np.array(chosen, dtype=np.int64)


def make_mesh_corpus(n_identities: int = 20, per_identity: int = 48, n_blendshapes: int = 8,
                     seed: int = 0, hierarchy: MeshHierarchy | None = None,
                     n_landmarks: int = 68) -> MeshCorpus:
    """Procedural identities on an icosphere template and expression displacements.

    Each blendshape is a smooth bump on the template sphere pushing vertices
    along the identity's own surface normal, with an amplitude modulated by a
    gain that follows the identity's surface relief, so the same landmark
    motion maps to different dense motion on different faces.
    """
    rng = np.random.default_rng(seed)
    h = hierarchy or icosphere_hierarchy(3)
    unit, faces = h.verts[0], h.faces[0]
    lm = _front_landmarks(unit, n_landmarks)
    base_radii = np.array([75.0, 95.0, 70.0])

    centres = unit[rng.choice(np.flatnonzero(unit[:, 2] > 0.3), n_blendshapes, replace=False)]
    widths = rng.uniform(0.25, 0.45, n_blendshapes)
    bumps = np.exp(-np.sum((unit[None] - centres[:, None]) ** 2, -1) / (2 * widths[:, None] ** 2))

    neutrals, normals, gains = [], [], []
    for _ in range(n_identities):
        radii = base_radii * rng.uniform(0.85, 1.15, 3)
        freq = rng.normal(0, 2.0, (4, 3))
        phase = rng.uniform(0, 2 * np.pi, 4)
        amp = rng.uniform(2.0, 6.0, 4)
        bump = (amp * np.sin(unit @ freq.T + phase)).sum(1)
        M = unit * radii * (1 + bump[:, None] / 100.0)
        neutrals.append(M)
        normals.append(vertex_normals(M, faces))
        # regional gain in [0.5, 1.5] read off the identity's own surface relief,
        # so how much a region moves is visible in the neutral mesh
        gains.append(1.0 + 0.5 * np.tanh(bump / 4.0))
    neutrals = np.array(neutrals)

    ids, dLs, dMs = [], [], []
    for i in range(n_identities):
        for s in range(per_identity):
            w = np.zeros(n_blendshapes)
            if s > 0:  # sample 0 of every identity is the zero-displacement pair
                active = rng.choice(n_blendshapes, rng.integers(1, 4), replace=False)
                w[active] = rng.uniform(-1.0, 1.0, active.size) * 8.0
            mag = (w @ bumps) * gains[i]
            dM = mag[:, None] * normals[i]
            ids.append(i)
            dMs.append(dM)
            dLs.append(dM[lm])
    return MeshCorpus(faces, lm, neutrals, np.array(ids), np.array(dLs), np.array(dMs))


@dataclass
class RetargetTrainSettings:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    landmark_weight: float = 1.0
    seed: int = 0


def retarget_loss(pred: torch.Tensor, target: torch.Tensor, landmark_idx: torch.Tensor,
                  landmark_weight: float = 1.0) -> torch.Tensor:
    """Per-vertex L1 plus landmark-consistency L1."""
    l1 = (pred - target).abs().mean()
    lm = (pred[:, landmark_idx] - target[:, landmark_idx]).abs().mean()
    return l1 + landmark_weight * lm


def train_retargeter(corpus: MeshCorpus, config: RetargetConfig, settings: RetargetTrainSettings,
                     hierarchy: MeshHierarchy | None = None):
    """Returns ``(model, losses)``."""
    torch.manual_seed(settings.seed)
    model = LandmarkRetargeter(config, hierarchy, corpus.landmark_idx)
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    neutrals = torch.as_tensor(corpus.neutrals, dtype=torch.float32)
    dL = torch.as_tensor(corpus.delta_L, dtype=torch.float32)
    dM = torch.as_tensor(corpus.delta_M, dtype=torch.float32)
    ident = torch.as_tensor(corpus.identity)
    losses = []
    model.train()
    for step in range(settings.steps):
        idx = torch.as_tensor(rng.integers(0, len(ident), settings.batch_size))
        pred = model(neutrals[ident[idx]], dL[idx])
        loss = retarget_loss(pred, dM[idx], model.landmark_idx, settings.landmark_weight)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite retargeting loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    model.trained = True
    return model, losses


@torch.no_grad()
def per_vertex_error(model: LandmarkRetargeter, corpus: MeshCorpus, batch_size: int = 64) -> np.ndarray:
    """Euclidean error (mm) of every vertex of every sample, shape (S, V)."""
    neutrals = torch.as_tensor(corpus.neutrals, dtype=torch.float32)
    out = []
    for i in range(0, len(corpus.identity), batch_size):
        sl = slice(i, i + batch_size)
        M = neutrals[torch.as_tensor(corpus.identity[sl])]
        pred = model(M, torch.as_tensor(corpus.delta_L[sl], dtype=torch.float32))
        out.append((pred.double() - torch.as_tensor(corpus.delta_M[sl])).norm(dim=-1))
    return torch.cat(out).numpy()
