"""Stride VAE: 1-D conv encoder to a 2-D latent, dense decoder to Fourier coefficients.

One model per joint. Strides enter already normalised (see ``strides.fit_stats``);
``reconstruct_degrees`` handles the round trip from and back to degrees.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import serialize
from .strides import N_SAMPLES, NormStats, denormalize, normalize

log = logging.getLogger(__name__)

LATENT_DIM = 2
N_COEFFS = 32


def fourier_basis(n_harmonics: int, tau=None, period: float = N_SAMPLES) -> np.ndarray:
    """Rows ``cos(2 pi k tau / period)`` for k = 1..K, then the matching sines: (2K, len(tau))."""
    tau = np.arange(N_SAMPLES) if tau is None else np.atleast_1d(np.asarray(tau, dtype=float))
    k = np.arange(1, n_harmonics + 1)
    arg = 2 * np.pi * np.outer(k, tau) / period
    return np.concatenate([np.cos(arg), np.sin(arg)])


def fourier_reconstruct(a, b, tau=None) -> np.ndarray:
    """Evaluate sum_k a_k cos(2 pi k tau/100) + b_k sin(2 pi k tau/100) at tau = 0..99 (or ``tau``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("a and b must have the same shape")
    basis = fourier_basis(a.shape[-1], tau)
    return np.concatenate([a, b], axis=-1) @ basis


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    patience: int = 20
    beta: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class VaeModel:
    """Encoder conv(1->8,k5) pool2 conv(8->16,k5) pool2 | dense 352-64-16 | heads 16->2, 16->2.

    Decoder dense 2-32-64-``n_coeffs`` feeding the Fourier basis.
    """

    def __init__(self, joint: str = "hip", seed: int = 0, n_coeffs: int = N_COEFFS, stats: NormStats | None = None):
        if n_coeffs % 2:
            raise ValueError("number of Fourier coefficients must be even")
        rng = np.random.default_rng(seed)
        self.joint = joint
        self.n_coeffs = n_coeffs
        self.stats = stats
        self.conv = nn.Chain([
            nn.Conv1D(1, 8, 5, rng=rng), nn.Activation("tanh"), nn.MaxPool1D(2),
            nn.Conv1D(8, 16, 5, rng=rng), nn.Activation("tanh"), nn.MaxPool1D(2),
        ])
        conv_len = (((N_SAMPLES - 4) // 2) - 4) // 2
        self.flat_size = 16 * conv_len
        self.fc = nn.Chain([nn.Dense(self.flat_size, 64, rng=rng), nn.Activation("tanh"),
                            nn.Dense(64, 16, rng=rng), nn.Activation("tanh")])
        self.mu_head = nn.Dense(16, LATENT_DIM, rng=rng)
        self.logsig_head = nn.Dense(16, LATENT_DIM, rng=rng)
        self.decoder = nn.Chain([nn.Dense(LATENT_DIM, 32, rng=rng), nn.Activation("tanh"),
                                 nn.Dense(32, 64, rng=rng), nn.Activation("tanh"),
                                 nn.Dense(64, n_coeffs, rng=rng)])
        self.basis = fourier_basis(n_coeffs // 2)

    # --- parameter plumbing ---------------------------------------------------

    def _parts(self):
        return {"conv.": self.conv, "fc.": self.fc, "mu.": nn.Chain([self.mu_head]),
                "logsig.": nn.Chain([self.logsig_head]), "dec.": self.decoder}

    def named_params(self):
        out = {}
        for prefix, chain in self._parts().items():
            out.update(chain.named_params(prefix))
        return out

    def load_named(self, params):
        for prefix, chain in self._parts().items():
            chain.load_named(params, prefix)

    def layers(self):
        """Flat (name, layer) list for serialisation."""
        out = []
        for prefix, chain in self._parts().items():
            out += [(f"{prefix}{i}", layer) for i, layer in enumerate(chain.layers)]
        return out

    # --- forward pieces --------------------------------------------------------

    def _encode(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != N_SAMPLES:
            raise nn.ShapeError(f"encoder expects strides of length {N_SAMPLES}, got shape {s.shape}")
        x = s.reshape(-1, 1, N_SAMPLES)
        conv_out, conv_cache = self.conv.forward(x)
        hid, fc_cache = self.fc.forward(conv_out.reshape(x.shape[0], -1))
        mu, mu_cache = self.mu_head.forward(hid)
        logsig, ls_cache = self.logsig_head.forward(hid)
        cache = (conv_out.shape, conv_cache, fc_cache, mu_cache, ls_cache)
        return mu, logsig, cache

    def _encode_backward(self, cache, dmu, dlogsig):
        conv_shape, conv_cache, fc_cache, mu_cache, ls_cache = cache
        dh1, g_mu = self.mu_head.backward(mu_cache, dmu)
        dh2, g_ls = self.logsig_head.backward(ls_cache, dlogsig)
        dflat, g_fc = self.fc.backward(fc_cache, dh1 + dh2)
        dx, g_conv = self.conv.backward(conv_cache, dflat.reshape(conv_shape))
        grads = {}
        grads.update(self.conv.named_grads(g_conv, "conv."))
        grads.update(self.fc.named_grads(g_fc, "fc."))
        grads.update({f"mu.0.{k}": v for k, v in g_mu.items()})
        grads.update({f"logsig.0.{k}": v for k, v in g_ls.items()})
        return dx.reshape(dx.shape[0], N_SAMPLES), grads

    def _decode(self, z):
        z = np.asarray(z, dtype=float).reshape(-1, LATENT_DIM)
        coeffs, cache = self.decoder.forward(z)
        return coeffs @ self.basis, coeffs, cache

    def _decode_backward(self, cache, ds_hat):
        dcoeffs = ds_hat @ self.basis.T
        dz, g = self.decoder.backward(cache, dcoeffs)
        return dz, self.decoder.named_grads(g, "dec.")

    def coefficients(self, z):
        """Decoder output split into (a, b)."""
        coeffs = self.decoder(np.asarray(z, dtype=float).reshape(-1, LATENT_DIM))
        h = self.n_coeffs // 2
        return coeffs[:, :h], coeffs[:, h:]

    # --- public ---------------------------------------------------------------

    def reconstruct_degrees(self, X_deg):
        """Encode (mode), decode and denormalise strides given in degrees."""
        if self.stats is None:
            raise ValueError("model has no normalisation stats")
        X = np.atleast_2d(np.asarray(X_deg, dtype=float))
        mu, _ = encode(self, normalize(X, self.stats))
        return denormalize(decode(self, mu), self.stats)


def encode(model: VaeModel, s):
    """Latent mean and standard deviation for normalised strides ``s`` (100,) or (B, 100)."""
    single = np.ndim(s) == 1
    mu, logsig, _ = model._encode(s)
    sigma = np.exp(logsig)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def sample_latent(mu, sigma, rng):
    """Reparameterised draw ``mu + sigma * eps`` with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    return mu + sigma * rng.standard_normal(mu.shape)


def decode(model: VaeModel, z):
    """Normalised-scale stride for latent ``z`` (2,) or (B, 2)."""
    single = np.ndim(z) == 1
    s_hat, _, _ = model._decode(z)
    return s_hat[0] if single else s_hat


def kl_standard_normal(mu, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I)) per row."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return 0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma), axis=-1)


def vae_loss(s, s_hat, mu, sigma, beta):
    """Batch mean of MSE(s, s_hat) + beta * KL."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    s_hat = np.atleast_2d(np.asarray(s_hat, dtype=float))
    if s.shape != s_hat.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {s_hat.shape}")
    mse = np.mean((s - s_hat) ** 2)
    return float(mse + beta * np.mean(kl_standard_normal(np.atleast_2d(mu), np.atleast_2d(sigma))))


def loss_and_grads(model: VaeModel, s, eps, beta):
    """Training loss on a batch with fixed noise ``eps`` and gradients for every parameter."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    B = s.shape[0]
    mu, logsig, enc_cache = model._encode(s)
    sigma = np.exp(logsig)
    z = mu + sigma * eps
    s_hat, _, dec_cache = model._decode(z)
    loss = vae_loss(s, s_hat, mu, sigma, beta)

    ds_hat = 2.0 * (s_hat - s) / s.size
    dz, g_dec = model._decode_backward(dec_cache, ds_hat)
    dmu = dz + beta * mu / B
    dlogsig = dz * eps * sigma + beta * (sigma**2 - 1.0) / B
    _, g_enc = model._encode_backward(enc_cache, dmu, dlogsig)
    return loss, {**g_enc, **g_dec}


def _eval_loss(model, X, beta, batch=1024):
    total = 0.0
    for i in range(0, X.shape[0], batch):
        xb = X[i : i + batch]
        mu, logsig, _ = model._encode(xb)
        s_hat, _, _ = model._decode(mu)
        total += vae_loss(xb, s_hat, mu, np.exp(logsig), beta) * xb.shape[0]
    return total / X.shape[0]


@dataclass
class TrainResult:
    model: VaeModel
    curves: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    stopped_early: bool


def train_vae(train, val, config: TrainConfig, joint="hip", stats=None, init: VaeModel | None = None) -> TrainResult:
    """Adam on normalised strides; returns the best-validation weights.

    Validation uses the latent mean (no sampling) so it is deterministic.
    """
    train = np.asarray(train, dtype=float)
    val = np.asarray(val, dtype=float)
    if train.shape[0] == 0 or val.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")
    model = init if init is not None else VaeModel(joint, seed=config.seed, stats=stats)
    if stats is not None:
        model.stats = stats
    rng = np.random.default_rng(config.seed + 1)
    opt = nn.AdamState(lr=config.lr)
    params = model.named_params()
    best = (np.inf, {k: v.copy() for k, v in params.items()}, 0)
    curves = []
    stale = 0
    stopped = False
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train.shape[0])
        total = 0.0
        for bi, start in enumerate(range(0, train.shape[0], config.batch_size)):
            xb = train[order[start : start + config.batch_size]]
            eps = rng.standard_normal((xb.shape[0], LATENT_DIM))
            loss, grads = loss_and_grads(model, xb, eps, config.beta)
            if not np.isfinite(loss):
                raise nn.NonFiniteError(f"non-finite VAE loss at epoch {epoch}, batch {bi}")
            params = nn.adam_step(opt, params, grads)
            model.load_named(params)
            total += loss * xb.shape[0]
        val_loss = _eval_loss(model, val, config.beta)
        if not np.isfinite(val_loss):
            raise nn.NonFiniteError(f"non-finite VAE validation loss at epoch {epoch}")
        curves.append((epoch, total / train.shape[0], val_loss))
        if val_loss < best[0]:
            best = (val_loss, {k: v.copy() for k, v in params.items()}, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                stopped = True
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    model.load_named(best[1])
    return TrainResult(model, curves, best[2], stopped)


def reconstruction_rmse(model, strides_deg):
    """Per-stride RMS reconstruction error in degrees: (mean, std, per_stride)."""
    X = np.atleast_2d(np.asarray(strides_deg, dtype=float))
    err = np.sqrt(np.mean((model.reconstruct_degrees(X) - X) ** 2, axis=1))
    return float(err.mean()), float(err.std()), err


# --- persistence ---------------------------------------------------------------------


def save_vae(path, model: VaeModel, config: TrainConfig | None = None, extra: dict | None = None):
    hyper = {
        "model": "stride-vae",
        "joint": model.joint,
        "n_coeffs": model.n_coeffs,
        "latent_dim": LATENT_DIM,
        "stats": model.stats.to_dict() if model.stats is not None else None,
        "train_config": asdict(config) if config is not None else None,
        **(extra or {}),
    }
    serialize.save(path, model.layers(), hyper)


def load_vae(path) -> VaeModel:
    layers, hyper = serialize.load(path)
    stats = NormStats.from_dict(hyper["stats"]) if hyper.get("stats") else None
    model = VaeModel(hyper["joint"], n_coeffs=hyper["n_coeffs"], stats=stats)
    named = dict(model.layers())
    for name, layer in layers:
        if name not in named or named[name].spec() != layer.spec():
            raise serialize.FormatError(f"layer {name!r} does not match the VAE architecture")
        named[name].params.update(layer.params)
    return model


def write_curves(path, curves):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in curves:
            w.writerow([e, repr(float(tr)), repr(float(va))])
