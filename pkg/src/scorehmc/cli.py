"""Command-line entry point: reproducible make-data / train / sample / eval runs.

Every command is a pure function of its config and input files; outputs land
in the ``--out`` directory together with a fully resolved config copy, so
reruns are byte-identical and any output directory reproduces its run.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .dsm import TrainConfig, TrainingDivergedError, load_checkpoint, save_checkpoint, train
from .hmc import AnnealingSchedule, annealed_sample, expected_denoised_sample
from .metrics import psnr, uncertainty_map
from .network import ConvScoreNetwork, MlpScoreNetwork
from .numerics import RngStream
from .operators import (
    CartesianMaskSpec,
    GaussianLikelihood,
    MaskedFourierOperator,
    broadcast_column_mask,
    make_mask,
    simulate_measurement,
    zero_filled,
)
from .phantoms import PhantomSpec, make_phantoms
from .score_models import GaussianMixtureScore, IsotropicGaussianScore, two_moons_mixture
from .tensorio import load_tensor, save_pgm, save_tensor

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3


def _require_file(cfg_key: str, path: str) -> Path:
    if not path:
        raise ConfigError(f"{cfg_key} must be set for this command")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{cfg_key}: no such file: {p}")
    return p


def _embed_complex(images: np.ndarray) -> np.ndarray:
    """Real images -> 2-channel complex layout with a zero imaginary part."""
    return np.stack([images, np.zeros_like(images)], axis=-1)


def _magnitude(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 2:
        return np.hypot(x[..., 0], x[..., 1])
    return x


def cmd_make_data(cfg: RunConfig, out: Path) -> None:
    spec = PhantomSpec(
        size=cfg["phantom.size"],
        min_ellipses=cfg["phantom.min_ellipses"],
        max_ellipses=cfg["phantom.max_ellipses"],
        min_intensity=cfg["phantom.min_intensity"],
        max_intensity=cfg["phantom.max_intensity"],
        seed=cfg["phantom.seed"],
    )
    train_set = make_phantoms(spec, cfg["phantom.count_train"])
    # held-out phantoms draw from a shifted seed so index streams never collide
    test_set = make_phantoms(replace(spec, seed=spec.seed + 1), cfg["phantom.count_test"])
    save_tensor(out / "train.tnsr", train_set)
    save_tensor(out / "test.tnsr", test_set)
    for i in range(min(cfg["preview.count"], len(train_set))):
        save_pgm(out / f"phantom{i:03d}.pgm", train_set[i])
    if cfg["measure.enabled"]:
        size = cfg["phantom.size"]
        mask_spec = CartesianMaskSpec(
            acceleration=cfg["mask.acceleration"],
            center_fraction=cfg["mask.center_fraction"],
            seed=cfg["mask.seed"],
        )
        mask2d = broadcast_column_mask(make_mask(mask_spec, size), size)
        op = MaskedFourierOperator(mask2d)
        sigma_n = cfg["measure.sigma_n"]
        ys = np.stack([
            simulate_measurement(op, _embed_complex(img), sigma_n,
                                 RngStream(cfg["measure.seed"], stream_id=i))
            for i, img in enumerate(test_set)
        ])
        save_tensor(out / "mask.tnsr", mask2d)
        save_tensor(out / "measurements.tnsr", ys)
    cfg.write_resolved(out)


def _build_network(cfg: RunConfig, dataset: np.ndarray):
    kind = cfg["network.kind"]
    if kind == "auto":
        kind = "mlp" if dataset.ndim == 2 else "conv"
    if kind == "mlp":
        if dataset.ndim != 2:
            raise ConfigError(f"network.kind=mlp expects flat (N, d) data, got {dataset.shape}")
        return MlpScoreNetwork(
            dim=dataset.shape[1], width=cfg["network.width"],
            hidden_layers=cfg["network.hidden_layers"],
            spectral_target=cfg["network.spectral_target"],
            sigma_floor=cfg["train.sigma_floor"], seed=cfg["train.seed"],
        )
    if kind == "conv":
        return ConvScoreNetwork(
            channels=dataset.shape[-1], features=cfg["network.features"],
            conv_layers=cfg["network.conv_layers"],
            spectral_target=cfg["network.spectral_target"],
            sigma_floor=cfg["train.sigma_floor"], seed=cfg["train.seed"],
        )
    raise ConfigError(f"unknown network.kind {kind!r}")


def _write_loss_trace(path: Path, losses, start_step: int) -> None:
    rows = [f"{start_step + i + 1},{loss!r}" for i, loss in enumerate(losses)]
    path.write_text("step,loss\n" + "\n".join(rows) + ("\n" if rows else ""))


def cmd_train(cfg: RunConfig, out: Path) -> None:
    data = load_tensor(_require_file("train.dataset", cfg["train.dataset"]))
    if data.ndim == 3 and cfg["train.as_complex"]:
        data = _embed_complex(data)
    train_cfg = TrainConfig(
        learning_rate=cfg["train.learning_rate"],
        noise_scale=cfg["train.noise_scale"],
        batch_size=cfg["train.batch_size"],
        steps=cfg["train.steps"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        adam_epsilon=cfg["train.adam_epsilon"],
        sigma_floor=cfg["train.sigma_floor"],
        seed=cfg["train.seed"],
    )
    start_step = 0
    if cfg["train.resume"]:
        net, _, start_step = load_checkpoint(_require_file("train.resume", cfg["train.resume"]))
    else:
        net = _build_network(cfg, data)
    try:
        net, losses = train(net, data, train_cfg, start_step=start_step)
    except TrainingDivergedError as err:
        _write_loss_trace(out / "loss_trace.csv", err.losses, start_step)
        cfg.write_resolved(out)
        raise
    save_checkpoint(out / "checkpoint.dsmc", net, train_cfg, start_step + train_cfg.steps)
    _write_loss_trace(out / "loss_trace.csv", losses, start_step)
    cfg.write_resolved(out)


def _parse_float_list(raw: str, key: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in raw.split(",") if tok.strip()])
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as a comma-separated float list") from None


def _parse_vector_list(raw: str, key: str) -> np.ndarray:
    vecs = []
    for part in raw.split(";"):
        part = part.strip().strip("()")
        if part:
            vecs.append([float(tok) for tok in part.split(",")])
    if not vecs:
        raise ConfigError(f"{key}: no vectors in {raw!r}")
    return np.array(vecs)


def _build_prior(cfg: RunConfig):
    kind = cfg["prior.kind"]
    if kind == "checkpoint":
        net, _, _ = load_checkpoint(_require_file("prior.checkpoint", cfg["prior.checkpoint"]))
        return net
    if kind == "gaussian":
        return IsotropicGaussianScore(
            np.full(cfg["prior.dim"], cfg["prior.mean"]), cfg["prior.tau2"]
        )
    if kind == "mixture":
        return GaussianMixtureScore(
            _parse_float_list(cfg["prior.weights"], "prior.weights"),
            _parse_vector_list(cfg["prior.means"], "prior.means"),
            _parse_float_list(cfg["prior.variances"], "prior.variances"),
        )
    if kind == "two_moons":
        return two_moons_mixture(
            components_per_arc=cfg["prior.arc_components"],
            radius=cfg["prior.arc_radius"],
            noise=cfg["prior.arc_noise"],
        )
    raise ConfigError(f"unknown prior.kind {kind!r}")


def _build_likelihood(cfg: RunConfig):
    if not cfg["sample.measurement"]:
        return None
    ys = load_tensor(_require_file("sample.measurement", cfg["sample.measurement"]))
    mask = load_tensor(_require_file("sample.mask", cfg["sample.mask"]))
    index = cfg["sample.measurement_index"]
    if ys.ndim == 4:
        if not (0 <= index < ys.shape[0]):
            raise ConfigError(f"sample.measurement_index {index} out of range for {ys.shape}")
        ys = ys[index]
    return GaussianLikelihood(MaskedFourierOperator(mask), ys, cfg["sample.sigma_n"])


def cmd_sample(cfg: RunConfig, out: Path) -> None:
    prior = _build_prior(cfg)
    likelihood = _build_likelihood(cfg)
    schedule = AnnealingSchedule(
        sigma_init=cfg["hmc.sigma_init"],
        sigma_final=cfg["hmc.sigma_final"],
        gamma=cfg["hmc.gamma"],
        epsilon=cfg["hmc.epsilon"] or None,
        exponent=cfg["hmc.exponent"],
        steps_per_temperature=cfg["hmc.steps_per_temperature"],
    )
    result = annealed_sample(
        prior, likelihood, schedule,
        n_chains=cfg["hmc.n_chains"],
        seed=cfg["hmc.seed"],
        n_leapfrog=cfg["hmc.leapfrog_steps"],
        n_quad=cfg["hmc.quad_points"],
        mh_correction=cfg["hmc.mh_correction"],
        final_steps=cfg["hmc.final_steps"],
        final_alpha=cfg["hmc.final_alpha"] or None,
        workers=cfg["run.workers"],
    )
    if cfg["hmc.eds"]:
        if likelihood is None:
            post = prior.score
        else:
            def post(x, sigma):
                return prior.score(x, sigma) + likelihood.score(x, sigma)
        result.samples = expected_denoised_sample(result.samples, result.final_sigma, post)
    save_tensor(out / "samples.tnsr", result.samples)
    (out / "diagnostics.txt").write_text(result.diagnostics_text())
    umap = uncertainty_map(result.samples) if result.samples.shape[0] >= 2 else None
    if umap is not None:
        save_tensor(out / "uncertainty_mean.tnsr", umap.mean)
        save_tensor(out / "uncertainty_std.tnsr", umap.std)
    if result.samples.ndim >= 3:  # image-shaped signals get previews
        for i in range(min(cfg["preview.count"], result.samples.shape[0])):
            save_pgm(out / f"sample{i:03d}.pgm", _magnitude(result.samples[i]))
        if umap is not None:
            save_pgm(out / "uncertainty_mean.pgm", _magnitude(umap.mean))
            save_pgm(out / "uncertainty_std.pgm", _magnitude(umap.std))
    cfg.write_resolved(out)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    samples = load_tensor(_require_file("eval.samples", cfg["eval.samples"]))
    truths = load_tensor(_require_file("eval.ground_truth", cfg["eval.ground_truth"]))
    truth = truths[cfg["eval.ground_truth_index"]] if truths.ndim == 3 else truths
    ys = load_tensor(_require_file("eval.measurement", cfg["eval.measurement"]))
    mask = load_tensor(_require_file("eval.mask", cfg["eval.mask"]))
    if ys.ndim == 4:
        ys = ys[cfg["eval.measurement_index"]]
    lik = GaussianLikelihood(MaskedFourierOperator(mask), ys, cfg["sample.sigma_n"])
    zf = _magnitude(zero_filled(lik))
    mags = _magnitude(samples)
    if mags.shape[1:] != truth.shape:
        raise ConfigError(
            f"sample shape {mags.shape[1:]} does not match ground truth {truth.shape}"
        )
    peak = float(truth.max())
    lines = []
    per_sample = [psnr(truth, mags[i], peak) for i in range(mags.shape[0])]
    for i, val in enumerate(per_sample):
        lines.append(f"sample {i:03d} psnr_db={val!r}")
    lines.append(f"mean_of_samples psnr_db={psnr(truth, mags.mean(axis=0), peak)!r}")
    lines.append(f"zero_filled psnr_db={psnr(truth, zf, peak)!r}")
    diag_path = cfg["eval.diagnostics"] or str(Path(cfg["eval.samples"]).parent / "diagnostics.txt")
    if Path(diag_path).exists():
        lines.append("# acceptance statistics")
        for line in Path(diag_path).read_text().splitlines():
            if line.startswith("chain "):
                lines.append(line)
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    sys.stdout.write(report)
    cfg.write_resolved(out)


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scorehmc",
        description="Score-prior Bayesian inversion: dataset generation, "
                    "denoising score matching, annealed HMC posterior sampling, "
                    "and PSNR evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="master seed overriding all *.seed keys")
        p.add_argument("--workers", type=int, help="parallel worker cap")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg.update_from_overrides(args.set)
        if args.seed is not None:
            cfg.apply_seed(args.seed)
        if args.workers is not None:
            cfg.set("run.workers", str(args.workers))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
