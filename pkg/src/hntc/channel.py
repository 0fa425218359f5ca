"""Synthetic geometric MIMO channels over a service area, UPA codebooks and beam-training powers.

The scene is a small set of propagation clusters between a fixed BS and a UE
moving on a horizontal plane:

* ``"scatterer"`` - a point scatterer; the BS-side direction is fixed and the
  UE-side direction follows the UE.
* ``"wall"`` - a vertical planar reflector ``y = offset``; the specular
  reflection point (image method) moves with the UE, so both link ends see
  directions that vary smoothly with position.
* ``"direct"`` - the (attenuated) line-of-sight path.

Each cluster carries a complex gain that varies smoothly over the area: a
constant mean plus a stationary Gaussian random field with squared-exponential
covariance of length ``corr_length``. The field is drawn with random Fourier
features, so it can be evaluated at any continuous coordinate and is fully
determined by the scene seed. Carrier phase is deliberately not modeled (it
would decorrelate the channel within a wavelength); the smooth gain field plays
that role at the scale that matters for position fingerprinting.

Arrays are uniform planar arrays in the y-z plane with half-wavelength spacing.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

N_FEATURES = 64


def steering(k_y, k_z, c_y, c_z):
    """UPA response for a unit direction with y/z components ``k_y``, ``k_z``.

    The z-phasor is the outer Kronecker factor, the y-phasor the inner one.
    """
    az = np.exp(1j * math.pi * k_z * np.arange(c_z))
    ay = np.exp(1j * math.pi * k_y * np.arange(c_y))
    return np.kron(az, ay) / math.sqrt(c_y * c_z)


def upa_response(theta, phi, c_y, c_z):
    """Array response ``a(theta, phi)`` of a ``c_y`` x ``c_z`` UPA.

    Phase increments are ``pi sin(theta) cos(phi)`` along y and
    ``pi sin(theta) sin(phi)`` along z.
    """
    s = math.sin(theta)
    return steering(s * math.cos(phi), s * math.sin(phi), c_y, c_z)


def quantized_angles(c_theta, c_phi):
    """Uniform angle grids on ``[-pi/2, pi/2)`` with ``c_theta`` / ``c_phi`` points."""
    if c_theta < 1 or c_phi < 1:
        raise ValueError("angle counts must be >= 1")
    theta = -math.pi / 2 + np.arange(c_theta) * math.pi / c_theta
    phi = -math.pi / 2 + np.arange(c_phi) * math.pi / c_phi
    return theta, phi


@dataclass(frozen=True)
class UpaCodebook:
    """Beams of a UPA codebook, row ``(u-1)*c_phi + (v-1)`` holding beam ``(u, v)``."""

    c_y: int
    c_z: int
    c_theta: int
    c_phi: int

    @property
    def size(self):
        return self.c_theta * self.c_phi

    @property
    def n_antennas(self):
        return self.c_y * self.c_z

    @property
    def shape(self):
        return (self.c_theta, self.c_phi)

    @property
    def beams(self):
        cache = self.__dict__.get("_beams")
        if cache is None:
            theta, phi = quantized_angles(self.c_theta, self.c_phi)
            cache = np.array([upa_response(t, p, self.c_y, self.c_z) for t in theta for p in phi])
            cache.setflags(write=False)
            object.__setattr__(self, "_beams", cache)
        return cache

    def beam(self, u, v):
        """1-based beam lookup."""
        if not (1 <= u <= self.c_theta and 1 <= v <= self.c_phi):
            raise IndexError(f"beam ({u}, {v}) outside codebook {self.shape}")
        return self.beams[(u - 1) * self.c_phi + (v - 1)]

    def index_of(self, flat):
        """Flat row index -> 1-based ``(u, v)``."""
        return (flat // self.c_phi + 1, flat % self.c_phi + 1)


@dataclass
class Cluster:
    kind: str
    position: tuple = (0.0, 0.0, 0.0)
    offset: float = 0.0
    gain_db: float = 0.0
    field_std: float = 0.7

    def __post_init__(self):
        if self.kind not in ("scatterer", "wall", "direct"):
            raise ValueError(f"unknown cluster kind {self.kind!r}")
        self.position = tuple(float(c) for c in self.position)


def default_clusters():
    return [
        Cluster("wall", offset=34.0, gain_db=-3.0),
        Cluster("wall", offset=-31.0, gain_db=-5.0),
        Cluster("scatterer", position=(75.0, 8.0, 12.0), gain_db=0.0),
    ]


@dataclass
class Scene:
    bs_position: tuple = (0.0, 0.0, 10.0)
    x0: float = 10.0
    x_end: float = 60.0
    y0: float = -25.0
    y_end: float = 25.0
    ue_height: float = 1.5
    clusters: list = field(default_factory=default_clusters)
    pathloss_exp: float = 2.5
    ref_distance: float = 50.0
    corr_length: float = 10.0
    seed: int = 0
    bs_array: tuple = (8, 8)
    ue_array: tuple = (2, 2)
    fading: bool = False

    def __post_init__(self):
        self.clusters = [c if isinstance(c, Cluster) else Cluster(**c) for c in self.clusters]
        self.bs_position = tuple(float(c) for c in self.bs_position)
        self.bs_array = tuple(int(c) for c in self.bs_array)
        self.ue_array = tuple(int(c) for c in self.ue_array)
        if not self.clusters:
            raise ValueError("scene needs at least one cluster")
        if not (self.x_end > self.x0 and self.y_end > self.y0):
            raise ValueError("scene bounds must span a non-empty rectangle")
        if self.corr_length <= 0:
            raise ValueError("correlation length must be positive")

    @property
    def m_r(self):
        return self.bs_array[0] * self.bs_array[1]

    @property
    def m_t(self):
        return self.ue_array[0] * self.ue_array[1]

    def contains(self, g):
        return (self.x0 <= g[0] <= self.x_end) and (self.y0 <= g[1] <= self.y_end)

    def _fields(self):
        cache = self.__dict__.get("_field_params")
        if cache is None:
            rng = np.random.default_rng([self.seed, 7919])
            n = len(self.clusters)
            omega = rng.normal(scale=1.0 / self.corr_length, size=(n, 2, N_FEATURES, 2))
            phase = rng.uniform(0, 2 * math.pi, size=(n, 2, N_FEATURES))
            base_phase = rng.uniform(0, 2 * math.pi, size=n)
            cache = (omega, phase, base_phase)
            self.__dict__["_field_params"] = cache
        return cache

    def gain_field(self, g):
        """Complex per-cluster gains (before pathloss) at 2-D coordinate(s) ``g``."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        omega, phase, base_phase = self._fields()
        arg = np.einsum("cpfd,nd->ncpf", omega, g) + phase[None]
        f = math.sqrt(2.0 / N_FEATURES) * np.cos(arg).sum(axis=-1)
        std = np.array([c.field_std for c in self.clusters])
        amp = 10 ** (np.array([c.gain_db for c in self.clusters]) / 20)
        noise = (f[..., 0] + 1j * f[..., 1]) / math.sqrt(2)
        return amp * np.exp(1j * base_phase) * (1.0 + std * noise)

    def to_dict(self):
        d = asdict(self)
        d.pop("_field_params", None)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["clusters"] = [Cluster(**c) for c in d.get("clusters", [])] or default_clusters()
        return cls(**d)


def save_scene(path, scene):
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2, sort_keys=True)


def load_scene(path):
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n, n[..., 0]


def _paths(scene, ue):
    """Per cluster: BS-side unit direction, UE-side unit direction, path length."""
    bs = np.asarray(scene.bs_position)
    out = []
    for c in scene.clusters:
        if c.kind == "direct":
            k_bs, d = _unit(ue - bs)
            k_ue, _ = _unit(bs - ue)
        elif c.kind == "scatterer":
            s = np.asarray(c.position)
            k_bs, d1 = _unit(s - bs)
            k_ue, d2 = _unit(s - ue)
            d = d1 + d2
        else:
            ue_img = ue.copy()
            ue_img[..., 1] = 2 * c.offset - ue[..., 1]
            bs_img = bs.copy()
            bs_img[1] = 2 * c.offset - bs[1]
            k_bs, d = _unit(ue_img - bs)
            k_ue, _ = _unit(bs_img - ue)
        out.append((k_bs, k_ue, d))
    return out


def channel_at(scene, g, draw=0):
    """MIMO channel ``H`` (``M_r`` x ``M_t``) at 2-D coordinate ``g``.

    ``draw`` selects an independent small-scale fading realization (random
    per-cluster phases) when ``scene.fading`` is set; otherwise every draw
    returns the same channel.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != (2,):
        raise ValueError("coordinate must be 2-D")
    if not scene.contains(g):
        raise ValueError(f"coordinate {tuple(g)} outside the scene area")
    return channels_at(scene, g[None, :], draw)[0]


def channels_at(scene, coords, draw=0):
    """Vectorized :func:`channel_at` over an ``(N, 2)`` coordinate array."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    ue = np.column_stack([coords, np.full(n, scene.ue_height)])
    gains = scene.gain_field(coords)
    if scene.fading and draw:
        rng = np.random.default_rng([scene.seed, 104729, int(draw)])
        gains = gains * np.exp(1j * rng.uniform(0, 2 * math.pi, size=gains.shape))
    by, bz = scene.bs_array
    uy, uz = scene.ue_array
    h = np.zeros((n, scene.m_r, scene.m_t), dtype=complex)
    for l, (k_bs, k_ue, d) in enumerate(_paths(scene, ue)):
        k_bs = np.broadcast_to(k_bs, (n, 3))
        amp = (np.broadcast_to(d, (n,)) / scene.ref_distance) ** (-scene.pathloss_exp / 2)
        a_r = _steering_batch(k_bs[:, 1], k_bs[:, 2], by, bz)
        a_t = _steering_batch(k_ue[:, 1], k_ue[:, 2], uy, uz)
        h += (gains[:, l] * amp)[:, None, None] * a_r[:, :, None] * a_t[:, None, :].conj()
    return h


def _steering_batch(k_y, k_z, c_y, c_z):
    az = np.exp(1j * math.pi * k_z[:, None] * np.arange(c_z))
    ay = np.exp(1j * math.pi * k_y[:, None] * np.arange(c_y))
    return (az[:, :, None] * ay[:, None, :]).reshape(len(k_y), -1) / math.sqrt(c_y * c_z)


@dataclass
class MeasurementParams:
    """Transmit power and receiver noise of beam training.

    If ``snr_r_db`` is given the noise variance is set per channel from
    ``SNR_r = 10 log10(p_t ||H||_2^2 / sigma_n2)``; otherwise the fixed
    ``sigma_n2`` is used.
    """

    p_t: float = 1.0
    sigma_n2: float = 0.0
    snr_r_db: float | None = None
    ue_codebook: UpaCodebook | None = None

    def __post_init__(self):
        if self.p_t <= 0:
            raise ValueError("p_t must be positive")
        if self.sigma_n2 < 0:
            raise ValueError("sigma_n2 must be non-negative")

    def noise_variance(self, h):
        """Noise variance for channel(s) ``h`` (shape ``(..., M_r, M_t)``)."""
        if self.snr_r_db is None:
            return np.full(np.shape(h)[:-2], self.sigma_n2)
        h_norm2 = np.linalg.norm(h, ord=2, axis=(-2, -1)) ** 2
        return self.p_t * h_norm2 / 10 ** (self.snr_r_db / 10)


def snr_r_db(h, p_t, sigma_n2):
    return 10 * math.log10(p_t * np.linalg.norm(h, 2) ** 2 / sigma_n2)


def beam_pair_gains(h, bs_codebook, ue_codebook):
    """Complex ``w^H H f`` for every BS beam (rows) and UE beam (columns)."""
    w = bs_codebook.beams
    f = ue_codebook.beams
    return np.einsum("km,...mn,jn->...kj", w.conj(), h, f)


def best_ue_powers(h, p_t, bs_codebook, ue_codebook, sigma_n2=0.0, rng=None):
    """Best-UE-beam received power for every BS beam.

    ``max_f |sqrt(p_t) w^H H f + n|^2`` with ``n ~ CN(0, sigma_n2)`` drawn
    independently per beam pair (no noise when ``sigma_n2`` is zero).
    Shape ``(..., |W|)``.
    """
    y = math.sqrt(p_t) * beam_pair_gains(h, bs_codebook, ue_codebook)
    sigma_n2 = np.asarray(sigma_n2, dtype=float)
    if np.any(sigma_n2 > 0):
        if rng is None:
            raise ValueError("noisy measurements need an rng")
        scale = np.sqrt(sigma_n2 / 2)[..., None, None]
        y = y + scale * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return np.max(np.abs(y) ** 2, axis=-1)


def measure_best_ue_power(scene, params, bs_codebook, bs_beam, g, rng=None, draw=0):
    """Noisy best-UE-beam power for one BS beam ``(u, v)`` at coordinate ``g``."""
    h = channel_at(scene, g, draw)
    u, v = bs_beam
    w = bs_codebook.beam(u, v)
    f = params.ue_codebook.beams
    y = math.sqrt(params.p_t) * (w.conj() @ h @ f.T)
    var = float(params.noise_variance(h))
    if var > 0:
        if rng is None:
            raise ValueError("noisy measurements need an rng")
        y = y + math.sqrt(var / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return float(np.max(np.abs(y) ** 2))
