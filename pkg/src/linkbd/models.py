"""Five GCN-autoencoder link predictors behind one interface.

All kinds share a two-layer GCN encoder Z = A~ ReLU(A~ X W0) W1 and an
inner-product decoder sigma(z_u . z_v). The variational kinds reparameterize
the second layer, the adversarial kinds add an MLP discriminator against a
standard-normal prior, and the cluster kind widens the embedding to 32 and
adds a soft-k-means discriminator term with corrupted-feature negatives.

Training is full-batch Adam with patience-based early stopping on the
validation-pair loss; the reconstruction objective is the weighted BCE over
all node pairs (positives upweighted by #non-edges/#edges, global norm
factor), streamed so Pubmed-sized graphs never materialize an n x n matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .graph import DataSplit, Graph, NormalizedAdjacency, normalize_adjacency

MODEL_KINDS = ("gae", "vgae", "gic", "arga", "arvga")

HIDDEN_DIM = 32
LATENT_DIM = 16  # gic uses two 32-wide layers instead


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss at epoch {epoch}: {value}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 500
    patience: int = 100
    disc_hidden: int = 64
    disc_lr: float = 0.001
    adversarial_weight: float = 1.0
    gic_clusters: int = 16
    gic_temp: float = 10.0
    gic_weight: float = 1.0
    seed: int = 0


@dataclass
class ModelState:
    kind: str
    seed: int
    w0: np.ndarray
    w1: np.ndarray
    w1_logvar: np.ndarray | None = None
    disc: dict[str, np.ndarray] | None = None
    centers: np.ndarray | None = None
    cluster_temp: float = 10.0
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def latent_dim(self) -> int:
        return self.w1.shape[1]

    def clone(self) -> "ModelState":
        return ModelState(
            kind=self.kind,
            seed=self.seed,
            w0=self.w0.copy(),
            w1=self.w1.copy(),
            w1_logvar=None if self.w1_logvar is None else self.w1_logvar.copy(),
            disc=None if self.disc is None else {k: v.copy() for k, v in self.disc.items()},
            centers=None if self.centers is None else self.centers.copy(),
            cluster_temp=self.cluster_temp,
        )


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_state(kind: str, n_features: int, cfg: TrainConfig, seed: int) -> ModelState:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    latent = HIDDEN_DIM if kind == "gic" else LATENT_DIM
    state = ModelState(
        kind=kind,
        seed=seed,
        w0=_glorot(rng, n_features, HIDDEN_DIM),
        w1=_glorot(rng, HIDDEN_DIM, latent),
        cluster_temp=cfg.gic_temp,
    )
    if kind in ("vgae", "arvga"):
        state.w1_logvar = _glorot(rng, HIDDEN_DIM, latent)
    if kind in ("arga", "arvga"):
        h = cfg.disc_hidden
        state.disc = {
            "w0": _glorot(rng, latent, h),
            "w1": _glorot(rng, h, h),
            "w2": _glorot(rng, h, 1),
        }
    if kind == "gic":
        state.centers = 0.1 * rng.standard_normal((cfg.gic_clusters, latent))
    return state


def _as_mm_operand(a):
    """Accept NormalizedAdjacency / sparse / ndarray / Tensor for encode."""
    if isinstance(a, NormalizedAdjacency):
        return a.matrix
    return a


def _mm(a, b: ad.Tensor) -> ad.Tensor:
    if isinstance(a, ad.Tensor):
        return ad.matmul(a, b)
    if sp.issparse(a):
        return ad.spmm(a, b)
    return ad.spmm(sp.csr_matrix(np.asarray(a, dtype=np.float64)), b)


def encoder_noise(n: int, latent: int, seed: int) -> np.ndarray:
    """The reparameterization draw used by the variational kinds."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE95]))
    return rng.standard_normal((n, latent))


def encode_tensors(
    params: dict[str, ad.Tensor],
    kind: str,
    norm_adj,
    x,
    noise: np.ndarray | None = None,
):
    """Tape-aware encoder; returns (z, aux) with variational aux tensors.

    `norm_adj` may be a constant sparse matrix or a Tensor (the attack path
    differentiates through the normalization); `x` likewise.
    """
    norm_adj = _as_mm_operand(norm_adj)
    if isinstance(x, ad.Tensor):
        xw0 = ad.matmul(x, params["w0"])
    elif sp.issparse(x):
        xw0 = ad.spmm(x, params["w0"])
    else:
        xw0 = ad.spmm(sp.csr_matrix(np.asarray(x, dtype=np.float64)), params["w0"])
    hidden = ad.relu(_mm(norm_adj, xw0))
    mu = _mm(norm_adj, ad.matmul(hidden, params["w1"]))
    aux = {}
    if kind in ("vgae", "arvga"):
        logsig = _mm(norm_adj, ad.matmul(hidden, params["w1_logvar"]))
        if noise is None:
            raise ValueError(f"{kind} encode needs a noise draw")
        z = ad.add(mu, ad.hadamard(ad.constant(noise), ad.exp(logsig)))
        aux = {"mu": mu, "logsig": logsig}
    else:
        z = mu
    return z, aux


def encode(state: ModelState, kind: str, norm_adj, x, seed: int = 0) -> np.ndarray:
    """Embed all nodes; deterministic for a fixed seed."""
    if kind != state.kind:
        raise ValueError(f"state is {state.kind!r}, asked to encode as {kind!r}")
    params = {k: ad.constant(v) for k, v in _weight_arrays(state).items()}
    noise = None
    if kind in ("vgae", "arvga"):
        n = norm_adj.shape[0] if not isinstance(norm_adj, ad.Tensor) else norm_adj.shape[0]
        noise = encoder_noise(n, state.latent_dim, seed)
    z, _ = encode_tensors(params, kind, norm_adj, x, noise=noise)
    return z.values


def score_pairs(z: np.ndarray, pairs) -> np.ndarray:
    """sigma(z_u . z_v) for each pair; symmetric in (u, v)."""
    if len(pairs) == 0:
        return np.zeros(0)
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.min() < 0 or arr.max() >= z.shape[0]:
        raise IndexError(f"pair index out of range for {z.shape[0]} nodes")
    raw = np.einsum("ij,ij->i", z[arr[:, 0]], z[arr[:, 1]])
    return 1.0 / (1.0 + np.exp(-raw))


def score_pairs_tensor(z: ad.Tensor, pairs) -> ad.Tensor:
    """Tape-aware pair scores as an (n_pairs, 1) tensor."""
    arr = np.asarray(pairs, dtype=np.int64)
    zu = ad.gather_rows(z, arr[:, 0])
    zv = ad.gather_rows(z, arr[:, 1])
    ones = ad.constant(np.ones((z.shape[1], 1)))
    return ad.sigmoid(ad.matmul(ad.hadamard(zu, zv), ones))


def _weight_arrays(state: ModelState) -> dict[str, np.ndarray]:
    out = {"w0": state.w0, "w1": state.w1}
    if state.w1_logvar is not None:
        out["w1_logvar"] = state.w1_logvar
    return out


def _disc_logits(disc_params: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    h = ad.relu(ad.matmul(x, disc_params["w0"]))
    h = ad.relu(ad.matmul(h, disc_params["w1"]))
    return ad.matmul(h, disc_params["w2"])


def kl_term(mu: ad.Tensor, logsig: ad.Tensor) -> ad.Tensor:
    """(0.5/n) * mean_i sum_j (mu^2 + sig^2 - 2 logsig - 1); zero iff N(0,1)."""
    n = mu.shape[0]
    sig2 = ad.exp(ad.scalar_mul(2.0, logsig))
    inner = ad.sub(
        ad.add(ad.hadamard(mu, mu), sig2),
        ad.add(ad.scalar_mul(2.0, logsig), ad.constant(np.ones(mu.shape))),
    )
    per_node = ad.reduce_sum(inner, axis=1)
    return ad.scalar_mul(0.5 / n, ad.reduce_mean(per_node))


def cluster_assignments(z: ad.Tensor, centers: np.ndarray, temp: float) -> ad.Tensor:
    """Soft k-means responsibilities r_ik = softmax_k(-temp * ||z_i - mu_k||^2)."""
    mu = ad.constant(centers)
    zz = ad.reduce_sum(ad.hadamard(z, z), axis=1)  # (n,1)
    cross = ad.matmul(z, ad.transpose(mu))  # (n,K)
    m2 = ad.constant((centers**2).sum(axis=1, keepdims=True).T)  # (1,K)
    d2 = ad.add(ad.sub(zz, ad.scalar_mul(2.0, cross)), m2)
    logits = ad.scalar_mul(-float(temp), d2)
    shift = ad.constant(logits.values.max(axis=1, keepdims=True))  # exact invariance
    e = ad.exp(ad.sub(logits, shift))
    return ad.divide(e, ad.reduce_sum(e, axis=1))


def cluster_discriminator_loss(
    z: ad.Tensor, z_fake: ad.Tensor, centers: np.ndarray, temp: float
) -> ad.Tensor:
    """BCE of D(z_i, c_i)=sigma(z_i . c_i) on real vs corrupted embeddings."""
    r = cluster_assignments(z, centers, temp)
    c = ad.sigmoid(ad.matmul(r, ad.constant(centers)))  # (n, latent)
    ones = ad.constant(np.ones((z.shape[1], 1)))
    d_real = ad.sigmoid(ad.matmul(ad.hadamard(z, c), ones))
    d_fake = ad.sigmoid(ad.matmul(ad.hadamard(z_fake, c), ones))
    preds = ad.concat_rows([d_real, d_fake])
    labels = np.vstack([np.ones((z.shape[0], 1)), np.zeros((z_fake.shape[0], 1))])
    return ad.bce_with_weights(preds, labels)


def update_centers(z: np.ndarray, centers: np.ndarray, temp: float) -> np.ndarray:
    """One detached soft-k-means step: recompute centers from responsibilities."""
    d2 = (
        (z**2).sum(axis=1, keepdims=True)
        - 2.0 * z @ centers.T
        + (centers**2).sum(axis=1, keepdims=True).T
    )
    logits = -temp * d2
    logits -= logits.max(axis=1, keepdims=True)
    r = np.exp(logits)
    r /= r.sum(axis=1, keepdims=True)
    mass = r.sum(axis=0)
    new = (r.T @ z) / np.maximum(mass[:, None], 1e-12)
    empty = mass < 1e-8
    if empty.any():
        new[empty] = centers[empty]
    return new


def reconstruction_loss(kind: str, scores: ad.Tensor, a_target, extras=None) -> ad.Tensor:
    """Weighted BCE over a dense score matrix, plus kind-specific terms.

    `scores` are probabilities over all pairs (the sigma(Z Z^T) matrix),
    `a_target` the 0/1 target. Positives carry weight #zeros/#ones and the
    total is scaled by n^2/(2 #zeros), matching the streamed objective the
    trainer uses.
    """
    t = np.asarray(
        a_target.todense() if sp.issparse(a_target) else a_target, dtype=np.float64
    )
    if not isinstance(scores, ad.Tensor):
        scores = ad.constant(scores)
    if scores.shape != t.shape:
        raise ValueError(f"scores {scores.shape} vs target {t.shape}")
    ones = float(t.sum())
    zeros = t.size - ones
    if ones == 0 or zeros == 0:
        raise ValueError("degenerate reconstruction target")
    pos_weight = zeros / ones
    norm = t.size / (2.0 * zeros)
    loss = ad.scalar_mul(norm, ad.bce_with_weights(scores, t, pos_weight=pos_weight))
    extras = extras or {}
    if kind in ("vgae", "arvga"):
        loss = ad.add(loss, kl_term(extras["mu"], extras["logsig"]))
    if kind == "gic" and "cluster_loss" in extras:
        loss = ad.add(loss, ad.scalar_mul(extras.get("gic_weight", 1.0), extras["cluster_loss"]))
    if kind in ("arga", "arvga") and "generator_loss" in extras:
        loss = ad.add(
            loss,
            ad.scalar_mul(extras.get("adversarial_weight", 1.0), extras["generator_loss"]),
        )
    return loss


class Adam:
    """Standard Adam on a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            self.params[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def pair_bce(z: np.ndarray, pos_pairs, neg_pairs) -> float:
    """Plain mean BCE on scored pairs; the validation-loss fuel."""
    scores = np.concatenate(
        [score_pairs(z, pos_pairs), score_pairs(z, neg_pairs)]
    )
    labels = np.concatenate([np.ones(len(pos_pairs)), np.zeros(len(neg_pairs))])
    p = np.clip(scores, 1e-12, 1.0 - 1e-12)
    return float(-(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)).mean())


class EpochRunner:
    """Owns one model's training loop state; reused by the attack trainer."""

    def __init__(self, kind: str, n_features: int, cfg: TrainConfig, seed: int):
        self.kind = kind
        self.cfg = cfg
        self.state = init_state(kind, n_features, cfg, seed)
        self.opt = Adam(_weight_arrays(self.state), lr=cfg.lr)
        if self.state.disc is not None:
            self.disc_opt = Adam(self.state.disc, lr=cfg.disc_lr)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1A]))

    def set_graph(self, norm_adj: sp.csr_matrix, x: np.ndarray | sp.spmatrix,
                  recon_target: ad.ReconTarget) -> None:
        self.norm_adj = norm_adj
        self.x_csr = x.tocsr() if sp.issparse(x) else sp.csr_matrix(x)
        self.recon_target = recon_target
        self.n = norm_adj.shape[0]

    def run_epoch(self, epoch: int) -> np.ndarray:
        """One full-batch update; returns the (pre-update) embeddings."""
        state, kind = self.state, self.kind
        noise_seed = int(self.rng.integers(0, 2**31 - 1))
        noise = None
        if kind in ("vgae", "arvga"):
            noise = encoder_noise(self.n, state.latent_dim, noise_seed)
        if kind in ("arga", "arvga"):
            self._discriminator_step(noise)
        perm = self.rng.permutation(self.n) if kind == "gic" else None
        z_values, grad_arrays = self.main_step_gradients(noise, perm)
        self.opt.step(grad_arrays)
        if kind == "gic":
            state.centers = update_centers(z_values, state.centers, state.cluster_temp)
        return z_values

    def main_step_gradients(self, noise, perm):
        """Weight gradients of the epoch objective, reconstruction streamed.

        The full-pair BCE contributes through a precomputed dL/dZ seed; the
        auxiliary terms ride the tape normally. Equivalent, entry for entry,
        to backward() through training_loss_and_grads.
        """
        state, cfg, kind = self.state, self.cfg, self.kind
        with ad.Tape() as tape:
            params = {
                k: ad.Tensor(v, requires_grad=True)
                for k, v in _weight_arrays(state).items()
            }
            z, aux = encode_tensors(params, kind, self.norm_adj, self.x_csr, noise)
            extra_loss = None
            if kind in ("vgae", "arvga"):
                extra_loss = kl_term(aux["mu"], aux["logsig"])
            if kind == "gic":
                z_fake, _ = encode_tensors(
                    params, kind, self.norm_adj, self.x_csr[perm], None
                )
                cl = cluster_discriminator_loss(
                    z, z_fake, state.centers, state.cluster_temp
                )
                extra_loss = ad.scalar_mul(cfg.gic_weight, cl)
            if kind in ("arga", "arvga"):
                dp = {k: ad.constant(v) for k, v in state.disc.items()}
                gen = ad.bce_with_weights(
                    ad.sigmoid(_disc_logits(dp, z)), np.ones((self.n, 1))
                )
                gen = ad.scalar_mul(cfg.adversarial_weight, gen)
                extra_loss = gen if extra_loss is None else ad.add(extra_loss, gen)

            _, dz = ad.recon_value_and_grad(
                z.values, self.recon_target, want_loss=False
            )
            seeds = [(z, dz)]
            if extra_loss is not None:
                seeds.append((extra_loss, np.ones((1, 1))))
            grads = tape.gradients(seeds)
            grad_arrays = {k: grads[t] for k, t in params.items() if t in grads}
        return z.values, grad_arrays

    def _discriminator_step(self, noise) -> None:
        state = self.state
        params = {k: ad.constant(v) for k, v in _weight_arrays(state).items()}
        z, _ = encode_tensors(params, self.kind, self.norm_adj, self.x_csr, noise)
        z_det = z.values
        prior = self.rng.standard_normal(z_det.shape)
        with ad.Tape() as tape:
            dp = {k: ad.Tensor(v, requires_grad=True) for k, v in state.disc.items()}
            logits = _disc_logits(dp, ad.constant(np.vstack([prior, z_det])))
            labels = np.vstack(
                [np.ones((z_det.shape[0], 1)), np.zeros((z_det.shape[0], 1))]
            )
            loss = ad.bce_with_weights(ad.sigmoid(logits), labels)
            grads = ad.backward(loss)
            grad_arrays = {k: grads[t] for k, t in dp.items() if t in grads}
        self.disc_opt.step(grad_arrays)


def train(kind: str, g: Graph, split: DataSplit, cfg: TrainConfig | None = None) -> ModelState:
    """Train one link predictor on the split's training graph.

    Early-stops when the validation loss has not improved for cfg.patience
    epochs (cap cfg.epochs) and returns the best-validation state.
    """
    cfg = cfg or TrainConfig()
    norm_adj = normalize_adjacency(split.train_adjacency).matrix
    target = ad.ReconTarget.from_adjacency(split.train_adjacency)
    runner = EpochRunner(kind, g.n_features, cfg, cfg.seed)
    runner.set_graph(norm_adj, g.features, target)
    best = _TrainLoop(runner, split, cfg).run()
    return best


class _TrainLoop:
    """Shared early-stopping loop; the attack trainer drives EpochRunner itself."""

    def __init__(self, runner: EpochRunner, split: DataSplit, cfg: TrainConfig):
        self.runner = runner
        self.split = split
        self.cfg = cfg

    def run(self) -> ModelState:
        best_val = np.inf
        best_state = None
        stale = 0
        history = []
        for epoch in range(1, self.cfg.epochs + 1):
            z = self.runner.run_epoch(epoch)
            val = pair_bce(z, self.split.val_pos, self.split.val_neg)
            if not np.isfinite(val):
                raise TrainingDiverged(epoch, val)
            history.append({"epoch": epoch, "val_loss": val})
            if val < best_val - 1e-9:
                best_val = val
                best_state = self.runner.state.clone()
                stale = 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    break
        best_state = best_state if best_state is not None else self.runner.state.clone()
        best_state.history = history
        return best_state


def training_loss_and_grads(
    state: ModelState,
    kind: str,
    norm_adj,
    x,
    recon_target: ad.ReconTarget,
    cfg: TrainConfig,
    noise: np.ndarray | None = None,
    perm: np.ndarray | None = None,
    prior: np.ndarray | None = None,
):
    """Full training objective for one epoch, on the tape end to end.

    Every stochastic draw is passed in so repeated calls are bit-identical;
    that makes this the reference for finite-difference verification and for
    checking the streamed fast path in EpochRunner.
    """
    x_csr = x.tocsr() if sp.issparse(x) else sp.csr_matrix(np.asarray(x, dtype=np.float64))
    with ad.Tape() as tape:
        params = {
            k: ad.Tensor(v, requires_grad=True) for k, v in _weight_arrays(state).items()
        }
        z, aux = encode_tensors(params, kind, norm_adj, x_csr, noise)
        loss = ad.recon_bce_logits(z, recon_target)
        if kind in ("vgae", "arvga"):
            loss = ad.add(loss, kl_term(aux["mu"], aux["logsig"]))
        if kind == "gic":
            if perm is None:
                raise ValueError("gic loss needs a corruption permutation")
            z_fake, _ = encode_tensors(params, kind, norm_adj, x_csr[perm], None)
            cl = cluster_discriminator_loss(z, z_fake, state.centers, state.cluster_temp)
            loss = ad.add(loss, ad.scalar_mul(cfg.gic_weight, cl))
        if kind in ("arga", "arvga"):
            if prior is None:
                raise ValueError("adversarial loss needs prior samples")
            dp = {k: ad.constant(v) for k, v in state.disc.items()}
            gen = ad.bce_with_weights(
                ad.sigmoid(_disc_logits(dp, z)), np.ones((z.shape[0], 1))
            )
            loss = ad.add(loss, ad.scalar_mul(cfg.adversarial_weight, gen))
        grads = ad.backward(loss)
        grad_arrays = {k: grads[t] for k, t in params.items() if t in grads}
    return loss.item(), grad_arrays


# ---------------------------------------------------------------------------
# Checkpoints: flat key -> matrix binary file with a text header.

_MAGIC = "lbckpt 1"


def save_state(state: ModelState, path: str) -> None:
    keys = _weight_arrays(state)
    if state.disc is not None:
        keys.update({f"disc.{k}": v for k, v in state.disc.items()})
    if state.centers is not None:
        keys["centers"] = state.centers
    header = [_MAGIC, f"kind {state.kind}", f"seed {state.seed}",
              f"cluster_temp {state.cluster_temp!r}"]
    for k, v in keys.items():
        header.append(f"key {k} {v.shape[0]} {v.shape[1]}")
    header.append("end\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode())
        for v in keys.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_state(path: str) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, _, rest = blob.partition(b"end\n")
    lines = head.decode().strip().split("\n")
    if lines[0] != _MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    kind = seed = None
    cluster_temp = 10.0
    keys = []
    for line in lines[1:]:
        tok = line.split()
        if tok[0] == "kind":
            kind = tok[1]
        elif tok[0] == "seed":
            seed = int(tok[1])
        elif tok[0] == "cluster_temp":
            cluster_temp = float(tok[1])
        elif tok[0] == "key":
            keys.append((tok[1], int(tok[2]), int(tok[3])))
    arrays = {}
    off = 0
    for name, r, c in keys:
        size = r * c * 8
        arrays[name] = np.frombuffer(rest[off : off + size], dtype="<f8").reshape(r, c).copy()
        off += size
    disc = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("disc.")}
    return ModelState(
        kind=kind,
        seed=seed,
        w0=arrays["w0"],
        w1=arrays["w1"],
        w1_logvar=arrays.get("w1_logvar"),
        disc=disc or None,
        centers=arrays.get("centers"),
        cluster_temp=cluster_temp,
    )
