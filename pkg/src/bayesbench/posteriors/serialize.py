"""Trained-state persistence: JSON manifest plus raw float64 array files.

Arrays are written little-endian IEEE-754 float64 with their shapes recorded
in the manifest, so the container stays self-describing and binary-free
beyond flat numeric payloads. Ensembles nest one subdirectory per member.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..models import ConfigurationError, MLPSpec, ParameterVector, layout_for
from .base import MAPPosterior, ParticlePosterior
from .ensembles import EnsemblePosterior, EnsembleState
from .laplace import LaplacePosterior, LaplaceState
from .mcd import MCDropoutPosterior
from .rank1 import Rank1Factor, Rank1Posterior, Rank1State
from .svgd import SVGDPosterior, SVGDState
from .swag import SWAGPosterior, SWAGState
from .vi import GaussianMeanField, MeanFieldPosterior

MANIFEST = "manifest.json"


def _write_array(directory: Path, name: str, arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    path = directory / f"{name}.f64"
    path.write_bytes(arr.astype("<f8").tobytes())
    return {"file": path.name, "shape": list(arr.shape)}


def _read_array(directory: Path, entry: dict) -> np.ndarray:
    raw = (directory / entry["file"]).read_bytes()
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def _layout_table(spec: MLPSpec) -> list:
    return [
        {"name": s.name, "offset": s.offset, "shape": list(s.shape)}
        for s in layout_for(spec).segments
    ]


def save_posterior(approx, directory) -> Path:
    """Persist any trained approximation; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = approx.spec
    manifest = {
        "algorithm": approx.algorithm,
        "spec": spec.to_dict(),
        "layout": _layout_table(spec),
        "arrays": {},
        "meta": {},
    }
    arrays = manifest["arrays"]

    if isinstance(approx, EnsemblePosterior):
        manifest["meta"]["member_algorithm"] = approx.state.algorithm
        manifest["meta"]["member_seeds"] = list(approx.state.member_seeds)
        manifest["meta"]["members"] = len(approx.members)
        for i, member in enumerate(approx.members):
            save_posterior(member, directory / f"member{i:02d}")
    elif isinstance(approx, (SVGDPosterior, ParticlePosterior)) and hasattr(approx, "particles"):
        arrays["particles"] = _write_array(
            directory, "particles", np.stack([p.values for p in approx.particles])
        )
        if isinstance(approx, SVGDPosterior):
            manifest["meta"]["bandwidth_mode"] = approx.state.bandwidth_mode
            manifest["meta"]["fixed_bandwidth"] = approx.state.fixed_bandwidth
    elif isinstance(approx, MeanFieldPosterior):
        arrays["mu"] = _write_array(directory, "mu", approx.q.mu.values)
        arrays["rho"] = _write_array(directory, "rho", approx.q.rho.values)
    elif isinstance(approx, SWAGPosterior):
        st = approx.state
        arrays["mean"] = _write_array(directory, "mean", st.mean.values)
        arrays["sq_mean"] = _write_array(directory, "sq_mean", st.sq_mean.values)
        dev = np.stack(st.deviations) if st.deviations else np.zeros((0, st.mean.size))
        arrays["deviations"] = _write_array(directory, "deviations", dev)
        manifest["meta"]["rank_k"] = st.rank_k
        manifest["meta"]["snapshots_taken"] = st.snapshots_taken
    elif isinstance(approx, LaplacePosterior):
        st = approx.state
        arrays["map_params"] = _write_array(directory, "map_params", st.map_params.values)
        arrays["precision"] = _write_array(directory, "precision", st.last_layer_precision)
        arrays["curvature"] = _write_array(directory, "curvature", st.curvature)
        manifest["meta"]["prior_precision"] = st.prior_precision
    elif isinstance(approx, Rank1Posterior):
        st = approx.state
        arrays["base"] = _write_array(directory, "base", st.base.values)
        manifest["meta"]["components"] = st.components
        for c, comp in enumerate(st.factors):
            for i, f in enumerate(comp):
                for field_name in ("r_mu", "r_rho", "s_mu", "s_rho"):
                    key = f"factor_c{c}_l{i}_{field_name}"
                    arrays[key] = _write_array(directory, key, getattr(f, field_name))
    elif isinstance(approx, (MAPPosterior, MCDropoutPosterior)):
        arrays["params"] = _write_array(directory, "params", approx.params.values)
    else:
        raise ConfigurationError(f"cannot serialize {type(approx).__name__}")

    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory / MANIFEST


def load_posterior(directory):
    """Rebuild a saved approximation from its manifest directory."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    spec = MLPSpec.from_dict(manifest["spec"])
    layout = layout_for(spec)
    arrays = manifest["arrays"]
    meta = manifest.get("meta", {})
    algo = manifest["algorithm"]

    def pv(name):
        return ParameterVector(_read_array(directory, arrays[name]), layout)

    if algo.startswith("multi-"):
        members = [
            load_posterior(directory / f"member{i:02d}") for i in range(meta["members"])
        ]
        state = EnsembleState(meta["member_algorithm"], members, list(meta["member_seeds"]))
        return EnsemblePosterior(state)
    if algo == "svgd":
        P = _read_array(directory, arrays["particles"])
        particles = [ParameterVector(row, layout) for row in P]
        return SVGDPosterior(spec, SVGDState(particles, meta["bandwidth_mode"], meta["fixed_bandwidth"]))
    if algo in ("hmc", "particles"):
        P = _read_array(directory, arrays["particles"])
        post = ParticlePosterior(spec, [ParameterVector(row, layout) for row in P])
        post.algorithm = algo
        return post
    if algo in ("bbb", "ivon"):
        q = GaussianMeanField(pv("mu"), pv("rho"))
        return MeanFieldPosterior(spec, q, algorithm=algo)
    if algo == "swag":
        dev = _read_array(directory, arrays["deviations"])
        state = SWAGState(
            mean=pv("mean"),
            sq_mean=pv("sq_mean"),
            deviations=[row for row in dev],
            rank_k=int(meta["rank_k"]),
            snapshots_taken=int(meta["snapshots_taken"]),
        )
        return SWAGPosterior(spec, state)
    if algo == "laplace":
        state = LaplaceState(
            map_params=pv("map_params"),
            last_layer_precision=_read_array(directory, arrays["precision"]),
            prior_precision=float(meta["prior_precision"]),
            curvature=_read_array(directory, arrays["curvature"]),
        )
        return LaplacePosterior(spec, state)
    if algo == "rank1":
        C = int(meta["components"])
        factors = []
        for c in range(C):
            comp = []
            for i in range(spec.num_layers):
                comp.append(
                    Rank1Factor(
                        *[
                            _read_array(directory, arrays[f"factor_c{c}_l{i}_{fname}"])
                            for fname in ("r_mu", "r_rho", "s_mu", "s_rho")
                        ]
                    )
                )
            factors.append(comp)
        return Rank1Posterior(spec, Rank1State(pv("base"), factors, C))
    if algo == "mcd":
        return MCDropoutPosterior(spec, pv("params"))
    if algo == "map":
        return MAPPosterior(spec, pv("params"))
    raise ConfigurationError(f"unknown algorithm {algo!r} in manifest")
