"""Domain-aware Gaussian privatization of adapter updates.

Every matrix entry of a client update is perturbed before transmission with
independent Gaussian noise of standard deviation

    sigma = base_scale(position) * kind_multiplier(kind) * scale_multiplier / eps_domain

where the base scale depends on layer depth (early layers get more noise),
the kind multiplier on whether the matrix is an A or B factor, and eps is the
transmitting domain's privacy budget. The server can shrink all scales at
once through the utility gate (multiplying ``scale_multiplier`` by the gate
factor whenever any utility proxy drops below its threshold), and budgets
decay every round so privacy tightens over time.

No clipping bound is enforced by default and no delta-dependent sigma rule
exists, so the (eps, delta) labels are nominal: this module implements the
stated mechanism literally rather than a formally accounted one. An optional
per-matrix Frobenius clipping norm is available for experimentation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

from .linalg import Matrix, Rng, frobenius_norm, gaussian
from .lora import AdapterKind, AdapterSet, LayerPosition, classify_layer, map_pairs

__all__ = [
    "DomainId",
    "UnknownDomainError",
    "NoiseCalibration",
    "BudgetTable",
    "DEFAULT_BUDGETS",
    "noise_std",
    "privatize",
    "privatize_static",
    "apply_utility_gate",
    "decay_budget",
]

# Domains are plain string identifiers (e.g. "IRF"); budget tables key on them.
DomainId = str

# Default per-domain budgets; smaller eps = more noise = stronger nominal privacy.
DEFAULT_BUDGETS: dict[DomainId, float] = {"IRF": 0.5, "Dreaddit": 2.0, "MultiWD": 1.5}


class UnknownDomainError(KeyError):
    """A client's domain has no entry in the budget table."""


@dataclass(frozen=True)
class NoiseCalibration:
    """Noise scales by layer position and adapter kind, plus the gate state.

    ``scale_multiplier`` starts at 1.0 and only ever shrinks: it is the
    product of every gate factor applied so far. Setting it to 0 disables
    noise entirely. ``nominal_delta`` is recorded for reporting but drives
    nothing.
    """

    base_scale: Mapping[LayerPosition, float] = field(
        default_factory=lambda: {p: p.default_base_scale for p in LayerPosition}
    )
    kind_multiplier: Mapping[AdapterKind, float] = field(
        default_factory=lambda: {k: k.noise_multiplier for k in AdapterKind}
    )
    gate_factor: float = 0.8
    scale_multiplier: float = 1.0
    nominal_delta: float = 1e-5
    clip_norm: float | None = None

    def __post_init__(self):
        if set(self.base_scale) != set(LayerPosition):
            raise ValueError("base_scale must cover all layer positions")
        if set(self.kind_multiplier) != set(AdapterKind):
            raise ValueError("kind_multiplier must cover both adapter kinds")
        for pos, scale in self.base_scale.items():
            if scale < 0:
                raise ValueError(f"base scale for {pos.value} must be >= 0, got {scale}")
        for kind, mult in self.kind_multiplier.items():
            if mult < 0:
                raise ValueError(f"multiplier for kind {kind.value} must be >= 0, got {mult}")
        if not 0.0 < self.gate_factor < 1.0:
            raise ValueError(f"gate_factor must be in (0, 1), got {self.gate_factor}")
        if self.scale_multiplier < 0:
            raise ValueError(f"scale_multiplier must be >= 0, got {self.scale_multiplier}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive when set, got {self.clip_norm}")


@dataclass(frozen=True)
class BudgetTable:
    """Per-domain privacy budgets with a decay schedule and a positive floor.

    ``decay_mode`` selects how the per-round decrement is read:
      * "multiplicative" (default): eps <- eps - decay_rate * eps, i.e. the
        current budget shrinks geometrically and stays positive forever.
      * "linear": eps <- eps - decay_rate * initial_eps, subtracting a fixed
        slice of the starting budget each round.
    Either way budgets never drop below ``floor``.
    """

    entries: Mapping[DomainId, float]
    initial: Mapping[DomainId, float]
    decay_rate: float = 0.1
    floor: float = 0.05
    decay_mode: str = "multiplicative"

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "initial", dict(self.initial))
        if set(self.entries) != set(self.initial):
            raise ValueError("entries and initial must cover the same domains")
        for domain, eps in self.entries.items():
            if eps <= 0:
                raise ValueError(f"budget for {domain!r} must be > 0, got {eps}")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ValueError(f"decay_rate must be in [0, 1), got {self.decay_rate}")
        if self.floor <= 0:
            raise ValueError(f"floor must be > 0, got {self.floor}")
        if self.decay_mode not in ("multiplicative", "linear"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")

    @classmethod
    def from_initial(
        cls,
        budgets: Mapping[DomainId, float] | None = None,
        decay_rate: float = 0.1,
        floor: float = 0.05,
        decay_mode: str = "multiplicative",
    ) -> "BudgetTable":
        budgets = dict(DEFAULT_BUDGETS if budgets is None else budgets)
        return cls(budgets, dict(budgets), decay_rate, floor, decay_mode)

    @classmethod
    def uniform(cls, domains, eps: float, **kwargs) -> "BudgetTable":
        """One global budget applied to every domain."""
        return cls.from_initial({d: eps for d in domains}, **kwargs)

    def epsilon(self, domain: DomainId) -> float:
        try:
            return self.entries[domain]
        except KeyError:
            raise UnknownDomainError(
                f"domain {domain!r} has no budget; known: {sorted(self.entries)}"
            ) from None

    def domains(self) -> tuple[DomainId, ...]:
        return tuple(sorted(self.entries))


def noise_std(
    position: LayerPosition,
    kind: AdapterKind,
    eps: float,
    cal: NoiseCalibration,
) -> float:
    """Effective Gaussian std for one matrix: base * kind_mult * gate_mult / eps."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    return (
        cal.base_scale[position]
        * cal.kind_multiplier[kind]
        * cal.scale_multiplier
        / eps
    )


def _clipped(m: Matrix, clip_norm: float | None) -> Matrix:
    if clip_norm is None:
        return m
    norm = frobenius_norm(m)
    if norm <= clip_norm:
        return m
    return Matrix(m.array * (clip_norm / norm))


def _noised(m: Matrix, std: float, rng: Rng) -> Matrix:
    # std == 0 must return the input bit-for-bit, so skip sampling entirely.
    if std == 0.0:
        return m
    noise = gaussian(rng, m.rows, m.cols, 0.0, std)
    return Matrix(m.array + noise.array)


def privatize(
    adapters: AdapterSet,
    domain: DomainId,
    budgets: BudgetTable,
    cal: NoiseCalibration,
    rng: Rng,
) -> AdapterSet:
    """Perturb every adapter matrix with its calibrated Gaussian noise.

    Noise std per matrix follows :func:`noise_std` with the layer position
    from :func:`classify_layer` and the domain's current budget. The input is
    never modified; with ``scale_multiplier == 0`` the output equals the
    input exactly. For each layer the B factor is noised before the A factor,
    in pair order, so a fixed rng stream gives a fixed result.
    """
    eps = budgets.epsilon(domain)

    def noise_pair(pair):
        position = classify_layer(pair.layer_index, adapters.total_layers)
        std_a = noise_std(position, AdapterKind.A, eps, cal)
        std_b = noise_std(position, AdapterKind.B, eps, cal)
        b = _noised(_clipped(pair.b, cal.clip_norm), std_b, rng)
        a = _noised(_clipped(pair.a, cal.clip_norm), std_a, rng)
        return a, b

    return map_pairs(adapters, noise_pair)


def privatize_static(adapters: AdapterSet, sigma: float, rng: Rng) -> AdapterSet:
    """Fixed-std variant: the same sigma for every parameter, no eps division."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")

    def noise_pair(pair):
        b = _noised(pair.b, sigma, rng)
        a = _noised(pair.a, sigma, rng)
        return a, b

    return map_pairs(adapters, noise_pair)


def apply_utility_gate(
    cal: NoiseCalibration,
    utilities: Mapping[str, float],
    thresholds: Mapping[str, float],
) -> tuple[NoiseCalibration, bool]:
    """Shrink all noise scales once if any utility fell below its threshold.

    The comparison is strict (utility < threshold) and the gate factor is
    applied at most once per call no matter how many metrics fail. Raises
    ``KeyError`` if a threshold names a metric absent from ``utilities``.
    """
    missing = [m for m in thresholds if m not in utilities]
    if missing:
        raise KeyError(f"thresholds reference unknown metrics: {missing}")
    triggered = any(utilities[m] < tau for m, tau in thresholds.items())
    if not triggered:
        return cal, False
    return replace(cal, scale_multiplier=cal.scale_multiplier * cal.gate_factor), True


def decay_budget(budgets: BudgetTable) -> BudgetTable:
    """One round of budget decay; monotone nonincreasing, floored."""
    new_entries = {}
    for domain, eps in budgets.entries.items():
        if budgets.decay_mode == "multiplicative":
            decayed = eps - budgets.decay_rate * eps
        else:
            decayed = eps - budgets.decay_rate * budgets.initial[domain]
        # At (or below) the floor the budget freezes; it never increases.
        new_entries[domain] = max(budgets.floor, decayed) if eps > budgets.floor else eps
    return replace(budgets, entries=new_entries)
