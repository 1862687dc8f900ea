"""Synthetic therapist-patient dyad recordings.

Walkers follow a harmonic nominal gait. In a coupled dyad each walker is
pushed off its nominal trajectory by the virtual spring-damper torque between
mirrored legs (therapist left <-> patient right) and pulled back by its own
postural impedance. Angles are degrees, velocities deg/s, torques N*m.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

RATE = 333.0
JOINTS = ("left_hip", "left_knee", "right_hip", "right_knee")
# joint i of one walker is coupled to joint MIRROR[i] of the other
MIRROR = (2, 3, 0, 1)
SIDES = ("left", "right")
ROLES = ("patient", "therapist")

TEMPLATE_ORDER = 6


def _periodic_bump(phi, center, width):
    d = (phi - center + 0.5) % 1.0 - 0.5
    return np.exp(-0.5 * (d / width) ** 2)


def _template_curves(n=400):
    """Hip and knee angle over one cycle starting at heel strike (deg)."""
    phi = np.arange(n) / n
    hip = 8.0 + 22.0 * np.cos(2 * np.pi * (phi - 0.02)) + 4.0 * np.cos(4 * np.pi * (phi - 0.1))
    knee = 5.0 + 14.0 * _periodic_bump(phi, 0.15, 0.06) + 58.0 * _periodic_bump(phi, 0.72, 0.09)
    return hip, knee


def _harmonics(curve, order):
    n = curve.size
    spec = np.fft.rfft(curve) / n
    mean = spec[0].real
    coef = 2.0 * spec[1 : order + 1]
    return mean, np.abs(coef), np.angle(coef)


def healthy_harmonics(order=TEMPLATE_ORDER):
    """Offsets (4,), amplitudes (4, order) and phases (4, order) of the template gait."""
    hip, knee = _template_curves()
    mh, ah, ph = _harmonics(hip, order)
    mk, ak, pk = _harmonics(knee, order)
    offsets = np.array([mh, mk, mh, mk])
    amps = np.stack([ah, ak, ah, ak])
    phases = np.stack([ph, pk, ph, pk])
    return offsets, amps, phases


@dataclass
class GaitProfile:
    """Parametric nominal gait of one walker.

    ``amplitudes``/``phases`` are per joint (rows in JOINTS order) and per
    harmonic; the right leg runs half a cycle behind the left.
    """

    cadence: float = 1.0
    offsets: np.ndarray = field(default_factory=lambda: healthy_harmonics()[0])
    amplitudes: np.ndarray = field(default_factory=lambda: healthy_harmonics()[1])
    phases: np.ndarray = field(default_factory=lambda: healthy_harmonics()[2])
    asymmetry: tuple = (1.0, 1.0)
    impairment: np.ndarray = field(default_factory=lambda: np.zeros(4))
    noise_deg: float = 0.3
    stance_fraction: float = 0.6
    start_phase: float = 0.75
    contact_jitter: bool = True

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(4)
        self.amplitudes = np.atleast_2d(np.asarray(self.amplitudes, dtype=float))
        self.phases = np.atleast_2d(np.asarray(self.phases, dtype=float))
        self.impairment = np.asarray(self.impairment, dtype=float).reshape(4)
        self.asymmetry = tuple(float(a) for a in self.asymmetry)
        if self.cadence <= 0:
            raise ValueError("cadence must be positive")
        if self.amplitudes.shape != self.phases.shape or self.amplitudes.shape[0] != 4:
            raise ValueError("amplitudes and phases must both be (4, order)")
        if self.amplitudes.shape[1] > TEMPLATE_ORDER:
            raise ValueError(f"harmonic order above {TEMPLATE_ORDER}")
        if not np.all(np.isfinite(self.amplitudes)):
            raise ValueError("amplitudes must be finite")
        if np.any((self.impairment < 0) | (self.impairment > 1)):
            raise ValueError("impairment must lie in [0, 1]")
        if not 0 < self.stance_fraction < 1:
            raise ValueError("stance_fraction must lie in (0, 1)")

    @property
    def order(self):
        return self.amplitudes.shape[1]

    def effective_amplitudes(self):
        side = np.array([self.asymmetry[0], self.asymmetry[0], self.asymmetry[1], self.asymmetry[1]])
        return self.amplitudes * (side * (1.0 - self.impairment))[:, None]

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d["asymmetry"] = list(self.asymmetry)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def random_profile(rng, impairment=None, cadence=None, noise_deg=0.3):
    """A healthy template perturbed in amplitude/phase, with a given impairment."""
    offsets, amps, phases = healthy_harmonics()
    amps = amps * rng.uniform(0.85, 1.15, size=amps.shape)
    phases = phases + rng.normal(0.0, 0.08, size=phases.shape)
    offsets = offsets + rng.normal(0.0, 2.0, size=4)
    if impairment is None:
        impairment = np.zeros(4)
        side = rng.integers(2)
        impairment[2 * side : 2 * side + 2] = rng.uniform(0.1, 0.5, size=2)
    return GaitProfile(
        cadence=float(rng.uniform(0.8, 1.05)) if cadence is None else cadence,
        offsets=offsets,
        amplitudes=amps,
        phases=phases,
        asymmetry=tuple(rng.uniform(0.9, 1.1, size=2)),
        impairment=impairment,
        noise_deg=noise_deg,
    )


def nominal_gait(profile: GaitProfile, t, cycle_phase=None):
    """Noise-free joint angles and velocities at times ``t``.

    ``cycle_phase`` overrides the left-leg phase (in cycles) when given.
    """
    t = np.asarray(t, dtype=float)
    phi_left = profile.start_phase + profile.cadence * t if cycle_phase is None else np.asarray(cycle_phase)
    k = np.arange(1, profile.order + 1)
    amps = profile.effective_amplitudes()
    q = np.empty(t.shape + (4,))
    qd = np.empty(t.shape + (4,))
    for j in range(4):
        phi = phi_left + (0.5 if j >= 2 else 0.0)
        arg = 2 * np.pi * np.multiply.outer(phi, k) + profile.phases[j]
        q[..., j] = profile.offsets[j] + np.cos(arg) @ amps[j]
        qd[..., j] = -(np.sin(arg) * (2 * np.pi * k * profile.cadence)) @ amps[j]
    return q, qd


def _contacts(phi_left, stance_fraction, jitter_rng):
    contact = np.empty((phi_left.size, 2), dtype=bool)
    for s in range(2):
        frac = (phi_left + 0.5 * s) % 1.0
        c = frac < stance_fraction
        if jitter_rng is not None:
            edges = np.flatnonzero(c[1:] & ~c[:-1]) + 1
            delay = edges[jitter_rng.random(edges.size) < 0.5]
            c[delay] = False
        contact[:, s] = c
    return contact


@dataclass
class WalkerStream:
    """Equally spaced joint frames of one walker."""

    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    contact: np.ndarray  # (N, 2) bool: left, right

    def __len__(self):
        return self.t.size

    def frames(self):
        for i in range(self.t.size):
            yield JointFrame(float(self.t[i]), self.q[i], self.qdot[i], (bool(self.contact[i, 0]), bool(self.contact[i, 1])))

    def features(self):
        """(N, 8) array of angles then velocities."""
        return np.concatenate([self.q, self.qdot], axis=1)


@dataclass(frozen=True)
class JointFrame:
    t: float
    q: np.ndarray
    qdot: np.ndarray
    contact: tuple


def _n_frames(duration, rate):
    if duration <= 0:
        raise ValueError("duration must be positive")
    return int(round(duration * rate))


def generate_gait(profile: GaitProfile, duration: float, rate: float = RATE, seed=0) -> WalkerStream:
    rng = np.random.default_rng(seed)
    n = _n_frames(duration, rate)
    t = np.arange(n) / rate
    q, qd = nominal_gait(profile, t)
    q = q + rng.normal(0.0, profile.noise_deg, size=q.shape) if profile.noise_deg > 0 else q
    phi = profile.start_phase + profile.cadence * t
    contact = _contacts(phi, profile.stance_fraction, rng if profile.contact_jitter else None)
    return WalkerStream(t, q, qd, contact)


@dataclass
class CouplingParams:
    """Virtual spring-damper per joint: stiffness N*m/rad, damping N*m*s/rad."""

    k_p: np.ndarray = field(default_factory=lambda: np.full(4, 20.0))
    k_t: np.ndarray = field(default_factory=lambda: np.full(4, 20.0))
    b_p: np.ndarray = field(default_factory=lambda: np.full(4, 1.0))
    b_t: np.ndarray = field(default_factory=lambda: np.full(4, 1.0))

    def __post_init__(self):
        for name in ("k_p", "k_t", "b_p", "b_t"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (4,)).copy()
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative")
            setattr(self, name, v)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("k_p", "k_t", "b_p", "b_t")}


def interaction_torque(stiffness, damping, theta_self, dtheta_self, theta_other, dtheta_other):
    """Desired interaction torque K*(other - self) + B*(dother - dself).

    Angles in degrees, velocities in deg/s; converted to radians so the
    result is in N*m for K in N*m/rad and B in N*m*s/rad.
    """
    stiffness = np.asarray(stiffness, dtype=float)
    damping = np.asarray(damping, dtype=float)
    if np.any(stiffness < 0):
        raise ValueError("stiffness must be non-negative")
    if np.any(damping < 0):
        raise ValueError("damping must be non-negative")
    err = np.deg2rad(np.asarray(theta_other, dtype=float) - theta_self)
    derr = np.deg2rad(np.asarray(dtheta_other, dtype=float) - dtheta_self)
    return stiffness * err + damping * derr


@dataclass
class DyadRecording:
    patient: WalkerStream
    therapist: WalkerStream
    params: CouplingParams
    rate: float = RATE
    dyad_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.patient.t

    @property
    def pairing(self):
        """Patient joint name -> coupled therapist joint name."""
        return {JOINTS[i]: JOINTS[MIRROR[i]] for i in range(4)}

    def write(self, path):
        """CSV of both walkers (patient block then therapist block) plus a JSON sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "role", "q1", "q2", "q3", "q4", "qd1", "qd2", "qd3", "qd4", "contactL", "contactR"])
            for role, s in (("patient", self.patient), ("therapist", self.therapist)):
                for i in range(len(s)):
                    w.writerow(
                        [repr(float(s.t[i])), role]
                        + [repr(float(v)) for v in s.q[i]]
                        + [repr(float(v)) for v in s.qdot[i]]
                        + [int(s.contact[i, 0]), int(s.contact[i, 1])]
                    )
        meta = {
            "dyad_id": self.dyad_id,
            "rate": self.rate,
            "coupling": self.params.to_dict(),
            "pairing": self.pairing,
            **self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        rows = {"patient": [], "therapist": []}
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["t", "role"] or len(header) != 12:
                raise ValueError(f"{path}: unexpected dyad CSV header {header}")
            for r in reader:
                rows[r[1]].append([float(v) for v in (r[0], *r[2:])])
        streams = {}
        for role, data in rows.items():
            a = np.asarray(data, dtype=float).reshape(-1, 11)
            streams[role] = WalkerStream(a[:, 0], a[:, 1:5], a[:, 5:9], a[:, 9:11].astype(bool))
        rest = {k: v for k, v in meta.items() if k not in ("dyad_id", "rate", "coupling", "pairing")}
        return cls(
            streams["patient"],
            streams["therapist"],
            CouplingParams(**meta["coupling"]),
            rate=meta["rate"],
            dyad_id=meta["dyad_id"],
            meta=rest,
        )


def couple_dyad(
    patient: GaitProfile,
    therapist: GaitProfile,
    params: CouplingParams,
    duration: float,
    rate: float = RATE,
    seed=0,
    *,
    inertia: float = 1.0,
    self_stiffness: float = 300.0,
    self_damping: float = 30.0,
    phase_lag: float = 0.0,
    substeps: int = 1,
    dyad_id: int = 0,
) -> DyadRecording:
    """Simulate two walkers joined by mirrored virtual spring-dampers.

    Both walk at the patient's cadence; the therapist runs half a cycle
    ahead so that mirrored legs move together, delayed by ``phase_lag``
    cycles. Each walker's deviation d from its nominal gait obeys

        inertia * d'' = tau_interaction - self_stiffness * d - self_damping * d'

    integrated with semi-implicit Euler.
    """
    rng = np.random.default_rng(seed)
    n = _n_frames(duration, rate)
    t = np.arange(n) / rate
    phi_p = patient.start_phase + patient.cadence * t
    phi_t = phi_p + 0.5 - phase_lag
    t_prof = GaitProfile(**{**therapist.__dict__, "cadence": patient.cadence})
    qp0, qdp0 = nominal_gait(patient, t, phi_p)
    qt0, qdt0 = nominal_gait(t_prof, t, phi_t)

    m = list(MIRROR)
    dp = np.zeros(4)
    vp = np.zeros(4)
    dt_ = np.zeros(4)
    vt = np.zeros(4)
    qp = np.empty((n, 4))
    qdp = np.empty((n, 4))
    qt = np.empty((n, 4))
    qdt = np.empty((n, 4))
    h = 1.0 / (rate * substeps)
    rad = np.pi / 180.0
    for i in range(n):
        qp[i] = qp0[i] + dp
        qdp[i] = qdp0[i] + vp
        qt[i] = qt0[i] + dt_
        qdt[i] = qdt0[i] + vt
        if i == n - 1:
            break
        for s in range(substeps):
            a = s / substeps
            bp, bvp = qp0[i] + a * (qp0[i + 1] - qp0[i]), qdp0[i] + a * (qdp0[i + 1] - qdp0[i])
            bt, bvt = qt0[i] + a * (qt0[i + 1] - qt0[i]), qdt0[i] + a * (qdt0[i + 1] - qdt0[i])
            thp, dthp = bp + dp, bvp + vp
            tht, dtht = bt + dt_, bvt + vt
            tau_p = interaction_torque(params.k_p, params.b_p, thp, dthp, tht[m], dtht[m])
            tau_t = interaction_torque(params.k_t, params.b_t, tht, dtht, thp[m], dthp[m])
            acc_p = (tau_p - self_stiffness * dp * rad - self_damping * vp * rad) / inertia / rad
            acc_t = (tau_t - self_stiffness * dt_ * rad - self_damping * vt * rad) / inertia / rad
            vp = vp + h * acc_p
            vt = vt + h * acc_t
            dp = dp + h * vp
            dt_ = dt_ + h * vt

    def noisy(q, sigma):
        return q + rng.normal(0.0, sigma, size=q.shape) if sigma > 0 else q

    qp = noisy(qp, patient.noise_deg)
    qt = noisy(qt, therapist.noise_deg)
    cp = _contacts(phi_p, patient.stance_fraction, rng if patient.contact_jitter else None)
    ct = _contacts(phi_t, therapist.stance_fraction, rng if therapist.contact_jitter else None)
    meta = {
        "seed": seed,
        "kind": "coupled",
        "patient_profile": patient.to_dict(),
        "therapist_profile": therapist.to_dict(),
        "admittance": {
            "inertia": inertia,
            "self_stiffness": self_stiffness,
            "self_damping": self_damping,
            "phase_lag": phase_lag,
        },
    }
    return DyadRecording(
        WalkerStream(t, qp, qdp, cp),
        WalkerStream(t.copy(), qt, qdt, ct),
        params,
        rate=rate,
        dyad_id=dyad_id,
        meta=meta,
    )


@dataclass
class LagTransform:
    """Therapist = offset + gain * lowpass(mirrored patient), delayed by ``lag`` frames."""

    lag: int = 25
    gain: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.8, 0.85, 0.8]))
    offset: np.ndarray = field(default_factory=lambda: np.array([3.0, -4.0, 3.0, -4.0]))
    cutoff_hz: float = 2.5
    noise_deg: float = 0.3

    def to_dict(self):
        return {
            "lag": self.lag,
            "gain": np.asarray(self.gain).tolist(),
            "offset": np.asarray(self.offset).tolist(),
            "cutoff_hz": self.cutoff_hz,
            "noise_deg": self.noise_deg,
        }


def lagged_dyad(
    patient: GaitProfile,
    duration: float,
    rate: float = RATE,
    seed=0,
    transform: LagTransform | None = None,
    params: CouplingParams | None = None,
    dyad_id: int = 0,
) -> DyadRecording:
    """Dyad whose therapist is a filtered, delayed copy of the patient's mirrored legs."""
    tf = transform or LagTransform()
    rng = np.random.default_rng(seed)
    n = _n_frames(duration, rate)
    settle = tf.lag + int(round(3.0 * rate))
    t_ext = (np.arange(n + settle) - settle) / rate
    q, qd = nominal_gait(patient, t_ext)
    alpha = 1.0 - np.exp(-2 * np.pi * tf.cutoff_hz / rate)
    b, a = [alpha], [1.0, alpha - 1.0]
    m = list(MIRROR)
    # start filter state at the initial value to avoid a transient
    zi = (1.0 - alpha) * q[0, m]
    fq = lfilter(b, a, q[:, m], axis=0, zi=zi[None, :])[0]
    fqd = lfilter(b, a, qd[:, m], axis=0, zi=((1.0 - alpha) * qd[0, m])[None, :])[0]
    gain = np.asarray(tf.gain, dtype=float)
    tq = tf.offset + gain * fq[settle - tf.lag : settle - tf.lag + n]
    tqd = gain * fqd[settle - tf.lag : settle - tf.lag + n]
    t = t_ext[settle:]
    pq = q[settle:] + rng.normal(0.0, patient.noise_deg, size=(n, 4))
    tq = tq + rng.normal(0.0, tf.noise_deg, size=(n, 4))
    phi = patient.start_phase + patient.cadence * t
    cp = _contacts(phi, patient.stance_fraction, rng if patient.contact_jitter else None)
    ct = _contacts(phi + 0.5 - tf.lag / rate * patient.cadence, patient.stance_fraction, None)
    meta = {"seed": seed, "kind": "lagged", "patient_profile": patient.to_dict(), "transform": tf.to_dict()}
    return DyadRecording(
        WalkerStream(t, pq, qd[settle:], cp),
        WalkerStream(t.copy(), tq, tqd, ct),
        params or CouplingParams(),
        rate=rate,
        dyad_id=dyad_id,
        meta=meta,
    )


def patient_cohort(n=8, seed=0):
    """Distinct patient profiles with distinct impairment vectors."""
    rng = np.random.default_rng(seed)
    return [random_profile(np.random.default_rng(rng.integers(2**32))) for _ in range(n)]


def gait_family(n, seed=0, noise_deg=0.3, n_samples=100):
    """Single-leg strides from a two-parameter family.

    Parameter 0 is a timing shift of the cycle (a smooth time warp moving the
    knee-flexion peak earlier/later); parameter 1 scales range of motion. Each
    joint keeps the template's cycle-mean angle, since a Fourier decoder
    without a constant term cannot express mean-posture changes. Returns
    ``strides (n, 2, n_samples)`` (hip, knee) in degrees and ``params (n, 2)``.
    """
    rng = np.random.default_rng(seed)
    offsets, amps, phases = healthy_harmonics()
    shift = rng.uniform(-0.6, 0.6, size=n)
    scale = rng.uniform(0.6, 1.3, size=n)
    phi = np.arange(n_samples) / n_samples
    warped = phi[None, :] + shift[:, None] * np.sin(2 * np.pi * phi)[None, :] / (2 * np.pi)
    k = np.arange(1, amps.shape[1] + 1)
    out = np.empty((n, 2, n_samples))
    for j in range(2):
        arg = 2 * np.pi * warped[..., None] * k + phases[j]
        wave = np.cos(arg) @ amps[j]
        out[:, j] = offsets[j] + scale[:, None] * (wave - wave.mean(axis=1, keepdims=True))
    out += rng.normal(0.0, noise_deg, size=out.shape)
    return out, np.stack([shift, scale], axis=1)
