"""Run configuration: YAML parsing, exact coupling fractions, and the
deterministic bond-potential presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from .flow import SeriesConfig

MAX_SITES_DEFAULT = 14


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_sites: int = 10
    t: Fraction = Fraction(1, 9)
    seed: int = 1
    potential_kind: str = "random"         # random | szz | identity | explicit
    explicit_matrices: tuple = ()
    d_values: tuple = (1, 3)
    k_eigs: int = 8
    s_values: tuple = (0.0, 0.1, 0.2, 0.5, 1.0)
    a_decay: float = 1.0
    site_a: int = 2
    site_b: int = 0                        # 0: picked as N-1 at run time
    sweep: tuple = ()                      # ((n, t), ...) extra points
    series: SeriesConfig = field(default_factory=SeriesConfig)
    max_sites: int = MAX_SITES_DEFAULT
    override_size_guard: bool = False
    output_dir: str = "out"

    def resolved(self) -> dict:
        """JSON-able snapshot embedded in every report."""
        return {
            "n_sites": self.n_sites,
            "t": str(self.t),
            "seed": self.seed,
            "potential_kind": self.potential_kind,
            "d_values": list(self.d_values),
            "k_eigs": self.k_eigs,
            "s_values": list(self.s_values),
            "a_decay": self.a_decay,
            "site_a": self.site_a,
            "site_b": self.site_b,
            "sweep": [[n, str(t)] for n, t in self.sweep],
            "series": {
                "j_max": self.series.j_max,
                "term_tol": self.series.term_tol,
                "defect_tol": self.series.defect_tol,
                "gap_fraction": self.series.gap_fraction,
                "final_j_max": self.series.final_j_max,
                "max_final_passes": self.series.max_final_passes,
            },
            "max_sites": self.max_sites,
            "override_size_guard": self.override_size_guard,
            "output_dir": self.output_dir,
        }


def parse_fraction(x) -> Fraction:
    """Couplings are carried exactly; '1/9' stays 1/9, never 0.111..."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x.strip())
    if isinstance(x, float):
        raise ConfigError(
            f"coupling {x!r} must be written as an exact fraction string, e.g. \"1/9\""
        )
    raise ConfigError(f"cannot parse coupling {x!r}")


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
    return config_from_dict(raw, overrides or {})


def config_from_dict(raw: dict, overrides: dict | None = None) -> RunConfig:
    overrides = overrides or {}
    run = dict(raw.get("run", {}))
    pots = dict(raw.get("potentials", {}))
    series_raw = dict(raw.get("series", {}))
    analysis = dict(raw.get("analysis", {}))
    limits = dict(raw.get("limits", {}))
    output = dict(raw.get("output", {}))

    known = {"j_max", "term_tol", "defect_tol", "gap_fraction", "final_j_max",
             "max_final_passes", "cg_rtol", "final_cg_rtol", "rank_cap",
             "expand_rank_budget"}
    bad = set(series_raw) - known
    if bad:
        raise ConfigError(f"unknown series options: {sorted(bad)}")
    series = SeriesConfig(**series_raw)

    kind = pots.get("kind", "random")
    if kind not in ("random", "szz", "identity", "explicit"):
        raise ConfigError(f"unknown potential kind {kind!r}")
    explicit = tuple(np.asarray(m, dtype=complex) for m in pots.get("matrices", []))

    sweep = tuple((int(p["n"]), parse_fraction(p["t"]))
                  for p in analysis.get("sweep", []))

    cfg = RunConfig(
        n_sites=int(run.get("n", 10)),
        t=parse_fraction(run.get("t", "1/9")),
        seed=int(overrides.get("seed", run.get("seed", 1))),
        potential_kind=kind,
        explicit_matrices=explicit,
        d_values=tuple(analysis.get("d_values", (1, 3))),
        k_eigs=int(analysis.get("k_eigs", 8)),
        s_values=tuple(analysis.get("s_values", (0.0, 0.1, 0.2, 0.5, 1.0))),
        a_decay=float(analysis.get("a_decay", 1.0)),
        site_a=int(analysis.get("site_a", 2)),
        site_b=int(analysis.get("site_b", 0)),
        sweep=sweep,
        series=series,
        max_sites=int(limits.get("max_sites", MAX_SITES_DEFAULT)),
        override_size_guard=bool(overrides.get("override_size_guard", False)),
        output_dir=str(overrides.get("output_dir", output.get("dir", "out"))),
    )
    if cfg.n_sites < 2:
        raise ConfigError("need at least 2 sites")
    return cfg


def check_size_guard(cfg: RunConfig, n_sites: int | None = None) -> None:
    n = n_sites if n_sites is not None else cfg.n_sites
    if n > cfg.max_sites and not cfg.override_size_guard:
        raise ConfigError(
            f"N={n} exceeds the size guard ({cfg.max_sites}); each state vector "
            f"costs 16*3^N = {16 * 3 ** n / 1e9:.1f} GB; pass --override-size-guard "
            "to proceed"
        )


# ---------------------------------------------------------------------------
# bond potentials


def random_bond_matrix(seed: int, bond: int) -> np.ndarray:
    """Hermitian 9x9 with spectral norm exactly 1, seeded per bond."""
    rng = np.random.default_rng((seed ^ bond) & 0xFFFFFFFFFFFFFFFF)
    m = rng.standard_normal((9, 9)) + 1j * rng.standard_normal((9, 9))
    h = (m + m.conj().T) / 2.0
    return h / np.linalg.norm(h, 2)


def build_potentials(cfg: RunConfig, n_sites: int | None = None,
                     t: Fraction | None = None) -> list[np.ndarray]:
    """One 9x9 hermitian matrix of norm <= 1 per bond 1..N-1."""
    from .chainops import spin1_generators

    n = n_sites if n_sites is not None else cfg.n_sites
    kind = cfg.potential_kind
    if kind == "random":
        return [random_bond_matrix(cfg.seed, i) for i in range(1, n)]
    if kind == "szz":
        _, _, sz = spin1_generators()
        szz = np.kron(sz, sz)
        return [szz.copy() for _ in range(1, n)]
    if kind == "identity":
        return [np.eye(9, dtype=complex) for _ in range(1, n)]
    if kind == "explicit":
        mats = list(cfg.explicit_matrices)
        if len(mats) != n - 1:
            raise ConfigError(f"explicit potentials: need {n - 1} matrices, got {len(mats)}")
        return mats
    raise ConfigError(f"unknown potential kind {kind!r}")
