"""``agil`` command-line interface."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from agil.errors import AgilError


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


class _Group(click.Group):
    """Turns package errors into a one-line message and a non-zero exit status."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except AgilError as exc:
            _fail(str(exc))


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Attention-guided imitation learning toolkit."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _experiment(config, protocol, **overrides):
    from agil.experiments import ExperimentConfig
    cfg = ExperimentConfig.load(config) if config else ExperimentConfig(protocol=protocol)
    if cfg.protocol != protocol:
        _fail(f"config {config} is for protocol {cfg.protocol!r}, not {protocol!r}")
    return cfg.with_overrides(**overrides)


def _split_for_eval(data: Path, seed: int, test_fraction: float, use_all: bool):
    from agil.data_model import load_trials, split_train_test
    trajs = load_trials(data)
    if use_all:
        return trajs
    return list(split_train_test(trajs, test_fraction, seed).test)


# -- data ---------------------------------------------------------------------


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--check", is_flag=True, help="Validate every trial and report schema errors.")
def ingest(directory: Path, check: bool) -> None:
    """Load trial directories and summarise them."""
    from agil.data_model import check_trial, trial_dirs
    dirs = trial_dirs(directory)
    if not dirs:
        _fail(f"{directory}: no trial directories found")
    errors = 0
    for d in dirs:
        try:
            info = check_trial(d)
            click.echo(f"{info['trial_id']}: {info['records']} records, "
                       f"{info['invalid']} invalid ({100 * info['invalid_fraction']:.1f}%)")
        except AgilError as exc:
            errors += 1
            click.echo(f"{d.name}: {exc}", err=True)
            if not check:
                raise
    click.echo(f"{len(dirs)} trials, {errors} with errors")
    if errors:
        sys.exit(1)


@main.command("render-gaze")
@click.argument("trial", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--frames", default=None, help="Comma-separated frame ids (default: all).")
def render_gaze(trial: Path, out: Path, frames: str | None) -> None:
    """Write ground-truth gaze maps (.npy) and heatmap overlays (.png) for a trial."""
    import cv2
    from agil.data_model import load_trial, on_screen
    from agil.retina import gaze_to_saliency_map, render_heatmap, save_saliency_map
    traj = load_trial(trial)
    wanted = {int(f) for f in frames.split(",")} if frames else None
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for rec in traj.records:
        if wanted is not None and rec.frame_id not in wanted:
            continue
        pts = [s for s in rec.gaze if on_screen(s, traj.geometry)]
        if not (rec.valid and pts):
            continue
        P = gaze_to_saliency_map(pts, traj.geometry)
        save_saliency_map(out / f"{rec.frame_id:06d}.npy", P)
        overlay = render_heatmap(P, rec.load_image())
        cv2.imwrite(str(out / f"{rec.frame_id:06d}.png"), cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
        n += 1
    click.echo(f"rendered {n} frames to {out}")


@main.command()
@click.argument("trial", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def features(trial: Path, out: Path) -> None:
    """Precompute per-frame Itti-Koch and motion maps for a trial."""
    from dataclasses import asdict
    from agil.data_model import load_trial
    from agil.features import FlowConfig, IttiKochConfig, itti_koch_saliency, motion_saliency, optical_flow
    traj = load_trial(trial)
    out.mkdir(parents=True, exist_ok=True)
    ids, sal, mot = [], [], []
    prev = None
    for rec in traj.records:
        raw = rec.load_image()
        ids.append(rec.frame_id)
        sal.append(itti_koch_saliency(raw))
        mot.append(motion_saliency(optical_flow(prev if prev is not None else raw, raw)))
        prev = raw
    np.savez_compressed(out / "features.npz", frame_ids=np.array(ids),
                        saliency=np.array(sal, np.float32), motion=np.array(mot, np.float32))
    meta = {"trial_id": traj.trial_id, "itti_koch": asdict(IttiKochConfig()),
            "flow": asdict(FlowConfig())}
    (out / "features.json").write_text(json.dumps(meta, indent=2) + "\n")
    click.echo(f"wrote {len(ids)} frames of features to {out}")


@main.command()
@click.option("--task", type=click.Choice(["dot_gaze", "disambiguation", "subject_style"]),
              required=True)
@click.option("--frames", "n_frames", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--frames-per-trial", type=int, default=None)
@click.option("--gaze-policy", type=click.Choice(["dot", "corner", "distractor"]), default=None)
@click.option("--subject", default=None, help="Subject id written into every trial.")
def synth(task, n_frames, seed, out, frames_per_trial, gaze_policy, subject) -> None:
    """Generate a synthetic dataset in the trial format."""
    from agil.synthetic_data import SyntheticSpec, generate, write_dataset
    kw = {"task": task, "n_frames": n_frames, "seed": seed}
    if frames_per_trial:
        kw["frames_per_trial"] = frames_per_trial
    if gaze_policy:
        kw["gaze_policy"] = gaze_policy
    if subject:
        kw["subject_id"] = subject
    paths = write_dataset(generate(SyntheticSpec(**kw)), out)
    click.echo(f"wrote {len(paths)} trials to {out}")


# -- gaze models --------------------------------------------------------------


@main.command("train-gaze")
@click.option("--channels", default="I+M", show_default=True)
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", type=int, default=None)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
def train_gaze_cmd(channels, data, seed, out, epochs, test_fraction) -> None:
    """Train a gaze network on the training split of DATA."""
    from dataclasses import replace
    from agil.data_model import load_trials, split_train_test
    from agil.gaze_net import (GazeNetConfig, GazeTrainConfig, build_gaze_net, save_gaze_model,
                               train_gaze)
    split = split_train_test(load_trials(data), test_fraction, seed)
    cfg = GazeTrainConfig(seed=seed)
    if epochs:
        cfg = replace(cfg, epochs=epochs)
    model = build_gaze_net(channels, GazeNetConfig(seed=seed))
    model, history = train_gaze(model, split, cfg)
    save_gaze_model(model, out, history)
    click.echo(f"saved {model.channels.label} gaze model to {out} "
               f"(best epoch {history.best_epoch}, val AUC {max(history.val_auc):.4f})")


@main.command("eval-gaze")
@click.option("--model", "model_ref", required=True,
              help="Model directory, or S / M for the saliency and motion baselines.")
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.option("--all", "use_all", is_flag=True, help="Evaluate every trial, not just the test split.")
def eval_gaze(model_ref, data, out, seed, test_fraction, use_all) -> None:
    """NSS / AUC / KL / CC of a gaze model on held-out frames."""
    from agil.gaze_net import baseline_predictor, evaluate_gaze_model, load_gaze_model
    from agil.harness import render_report
    model = {"S": "saliency", "M": "motion"}.get(model_ref.upper())
    model = baseline_predictor(model) if model else load_gaze_model(model_ref)
    report = evaluate_gaze_model(model, _split_for_eval(data, seed, test_fraction, use_all))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "csv", count_label="n_frames"))
    for row in report.rows:
        click.echo(f"{row.game} {row.model} {row.metric} {row.mean:.4f} ± {row.std:.4f}")


# -- policies -----------------------------------------------------------------


@main.command("train-policy")
@click.option("--variant", type=click.Choice(["plain", "foveated", "attention"]), required=True)
@click.option("--gaze-model", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", type=int, default=None)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
def train_policy_cmd(variant, gaze_model, data, seed, out, epochs, test_fraction) -> None:
    """Behaviour-clone a policy variant on the training split of DATA."""
    from dataclasses import replace
    from agil.data_model import load_trials, split_train_test
    from agil.gaze_net import load_gaze_model
    from agil.policy_net import (PolicyConfig, PolicyTrainConfig, build_policy, save_policy,
                                 train_policy)
    gaze = load_gaze_model(gaze_model) if gaze_model else None
    split = split_train_test(load_trials(data), test_fraction, seed)
    cfg = PolicyTrainConfig(seed=seed)
    if epochs:
        cfg = replace(cfg, epochs=epochs)
    model = build_policy(variant, PolicyConfig(seed=seed), gaze)
    model, history = train_policy(model, split, cfg)
    save_policy(model, out, history, gaze_model.resolve() if gaze_model else None)
    last = history.rows[-1]
    click.echo(f"saved {model.variant.label} policy to {out} "
               f"(train acc {last['train_acc']:.1f}%, test acc {last.get('test_acc', float('nan')):.1f}%)")


@main.command("eval-policy")
@click.option("--policy", "policies", multiple=True, required=True,
              type=click.Path(exists=True, path_type=Path),
              help="Policy directory; repeat to aggregate seeds and variants.")
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-fraction", type=float, default=0.2, show_default=True)
@click.option("--all", "use_all", is_flag=True)
def eval_policy(policies, data, out, seed, test_fraction, use_all) -> None:
    """Held-out action accuracy (mean ± std over the given policies, per variant)."""
    from agil.harness import PolicyReport, PolicyRow, render_report
    from agil.pipeline import FeatureStore
    from agil.policy_net import action_accuracy, load_policy
    test = _split_for_eval(data, seed, test_fraction, use_all)
    store = FeatureStore()
    report = PolicyReport()
    for k, path in enumerate(policies):
        model = load_policy(path)
        for game in sorted({t.game for t in test}):
            acc = action_accuracy(model, [t for t in test if t.game == game], store)
            report.rows.append(PolicyRow(game, model.variant.value, k, acc))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "csv"))
    click.echo(render_report(report, "markdown"))


@main.command()
@click.option("--policy", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gaze-model", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--env", "env_spec", default="toy", show_default=True, help="toy or ale:<rom>")
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--eta", type=float, default=1.0, show_default=True)
@click.option("--max-steps", type=int, default=None)
@click.option("--frame-skip", type=int, default=1, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
def play(policy, gaze_model, env_spec, episodes, seed, eta, max_steps, frame_skip, out) -> None:
    """Roll out a policy for seeded episodes and record the scores."""
    from agil.agent import make_env, rollout, summarize_scores
    from agil.gaze_net import load_gaze_model
    from agil.harness import render_report
    from agil.policy_net import load_policy
    gaze = load_gaze_model(gaze_model) if gaze_model else None
    model = load_policy(policy, gaze)
    scores = rollout(make_env(env_spec), model, gaze or model.gaze_model, episodes, seed, eta,
                     max_steps=max_steps, frame_skip=frame_skip)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(scores, "csv"))
    s = summarize_scores(scores)
    click.echo(f"mean score {s['mean']:.3f} ± {s['std']:.3f} over {s['n_ok']} episodes "
               f"({s['n_failed']} failed)")


# -- experiment protocols -----------------------------------------------------


def _protocol_options(f):
    f = click.option("--config", type=click.Path(exists=True, path_type=Path), default=None,
                     help="Experiment YAML (see configs/).")(f)
    f = click.option("--out", required=True, type=click.Path(path_type=Path))(f)
    f = click.option("--data", type=click.Path(exists=True, path_type=Path), default=None,
                     help="Trial directory root (default: the config's data section).")(f)
    f = click.option("--seed", type=int, default=None)(f)
    return f


def _run_protocol(protocol, config, data, seed, out, **overrides):
    from agil.experiments import run_experiment, write_report
    cfg = _experiment(config, protocol, seed=seed, **overrides)
    report = run_experiment(cfg, data)
    path = write_report(report, out)
    click.echo(path.with_suffix(".md").read_text())
    return report


@main.command()
@_protocol_options
@click.option("--epochs", type=int, default=None)
def ablation(config, data, seed, out, epochs) -> None:
    """Gaze-model ablation grid (S, M, I, I+S, I+M, I+S+M)."""
    cfg_over = {"gaze_train": {"epochs": epochs}} if epochs else {}
    _run_protocol("ablation", config, data, seed, out, **cfg_over)


@main.command()
@_protocol_options
@click.option("--fractions", default=None, help="Comma-separated, e.g. 0.1,0.25,0.5,1.0")
@click.option("--channels", default=None)
def curve(config, data, seed, out, fractions, channels) -> None:
    """Held-out AUC against training-set size (nested subsets)."""
    fr = [float(x) for x in fractions.split(",")] if fractions else None
    _run_protocol("curve", config, data, seed, out, fractions=fr, channels=channels)


@main.command("cross-subject")
@_protocol_options
@click.option("--channels", default=None)
def cross_subject(config, data, seed, out, channels) -> None:
    """Train on each subject's first trial, test on every subject's other trials."""
    _run_protocol("cross_subject", config, data, seed, out, channels=channels)


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path),
              help="A metrics CSV written by eval-gaze or ablation.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=None, help="Accepted for uniformity; unused.")
@click.option("--reference", is_flag=True, help="Append the published reference table.")
def report(data, out, seed, reference) -> None:
    """Render a metrics CSV as markdown tables."""
    from agil.harness import parse_metrics_csv, reference_markdown, render_report
    text = render_report(parse_metrics_csv(Path(data).read_text()), "markdown")
    if reference:
        text += "\n**Published reference values**\n\n" + reference_markdown("gaze_metrics")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    click.echo(text)


if __name__ == "__main__":  # pragma: no cover
    main()
