"""
Command line front end: one subcommand per experiment pipeline.

    pda_lab train --plan plan.cfg --data shapes:n=2000,size=16,seed=1 --out runs/pda
    pda_lab attack-eval --model runs/pda --data test.bin --attack pgd --eps 8 --steps 20 --alpha 2 --out attack.csv
    pda_lab corrupt --data test.bin --out suite
    pda_lab eval-corruption --model runs/pda --baseline runs/natural --suite suite --out report.csv

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from typing import Callable, Dict, List, Optional, Sequence

from argparse import ArgumentParser, Namespace

import os
import sys

import numpy as np
from sipyco.common_args import verbosity_args, init_logger_from_args

from pda_lab.analysis.fourier import DEFAULT_NORM_FRACTION, fourier_heatmap
from pda_lab.analysis.gradviz import grad_visualization
from pda_lab.analysis.theory import (BoundProbe, estimate_constants, per_example_losses, perturbation_bound_check,
                                     generalization_bound_from_points)
from pda_lab.attacks import AttackSpec, attack_dataset, evaluate_attack, parse_norm
from pda_lab.config import derive_seed, eps_from_255, rng_for, write_config
from pda_lab.corruptions import KINDS, build_corruption_suite, load_corruption_suite
from pda_lab.data.formats import (resolve_dataset, scale_to_u8, write_csv, write_dataset, write_image,
                                  write_matrix_csv, write_pgm)
from pda_lab.metrics import (build_report, category_set, error_rate, evaluate_error_table, mixed_test,
                             write_report_csv)
from pda_lab.nn import build_model, load_checkpoint, predict, read_checkpoint_manifest, save_checkpoint
from pda_lab.training import TrainPlan, ablate_k, train

import logging
logger = logging.getLogger(__name__)


class UsageExit(Exception):
    """Parser exit carrying its status code."""
    def __init__(self, status: int):
        super().__init__(status)
        self.status = status


class PdaArgumentParser(ArgumentParser):
    """Prints the full flag documentation on usage errors."""
    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write("\n{}: error: {}\n".format(self.prog, message))
        raise UsageExit(2)

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise UsageExit(status)


def _add_common(parser: ArgumentParser):
    parser.add_argument("--seed", type=int, default=0, help="global seed (default: 0)")
    verbosity_args(parser)


def _add_attack_args(group, eps_default: Sequence[float] = (8.,)):
    group.add_argument("--attack", choices=("fgsm", "pgd", "cw"), default="pgd", help="attack family (default: pgd)")
    group.add_argument("--eps", type=float, nargs="+", default=list(eps_default),
                       help="budget(s) in /255 units (default: {})".format(" ".join("{:g}".format(e)
                                                                                   for e in eps_default)))
    group.add_argument("--alpha", type=float, default=2., help="pgd step size in /255 units (default: 2)")
    group.add_argument("--steps", type=int, default=20, help="iterations (default: 20)")
    group.add_argument("--norm", default="inf", help="pgd norm, inf or 2 (default: inf)")
    group.add_argument("--c", type=float, default=500., help="C&W constant (default: 500)")
    group.add_argument("--lr", type=float, default=0.01, help="C&W step size (default: 0.01)")
    group.add_argument("--no-random-init", dest="random_init", action="store_false",
                       help="start pgd at the clean input")


def get_argparser() -> ArgumentParser:
    parser = PdaArgumentParser(prog="pda_lab", description="Progressive data augmentation robustness lab")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a model from a plan file")
    group = p.add_argument_group("training")
    group.add_argument("--plan", required=True, help="plan file (key=value)")
    group.add_argument("--data", required=True, help="training data: PDAD file, idx:<img>,<lbl> or generator spec")
    group.add_argument("--eval-data", default=None, help="held-out data for per-epoch attack tracking")
    group.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=None, help="override the plan seed")
    verbosity_args(p)

    p = sub.add_parser("attack-eval", help="evaluate a checkpoint under attack")
    group = p.add_argument_group("attack")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--data", required=True, help="evaluation data")
    _add_attack_args(group)
    group.add_argument("--out", required=True, help="report CSV")
    _add_common(p)

    p = sub.add_parser("corrupt", help="build a corrupted evaluation suite")
    group = p.add_argument_group("suite")
    group.add_argument("--data", required=True, help="clean evaluation data")
    group.add_argument("--kinds", nargs="+", default=["all"],
                       help="kinds or categories (default: all = {})".format(", ".join(KINDS)))
    group.add_argument("--workers", type=int, default=1, help="threads across images (default: 1)")
    group.add_argument("--out", required=True, help="suite directory")
    _add_common(p)

    p = sub.add_parser("eval-corruption", help="CE / mCE / relative mCE against a baseline")
    group = p.add_argument_group("evaluation")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--baseline", required=True, help="baseline checkpoint (naturally trained)")
    group.add_argument("--suite", required=True, help="suite directory")
    group.add_argument("--out", required=True, help="report CSV")
    _add_common(p)

    p = sub.add_parser("mixed-test", help="accuracy on clean + adversarial + corrupted examples")
    group = p.add_argument_group("mixed test")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--suite", required=True, help="suite directory")
    group.add_argument("--category", default="all", choices=("all", "noise", "blur", "weather", "digital", "other"),
                       help="corruption category (default: all)")
    group.add_argument("--eps", type=float, default=4., help="pgd budget in /255 units (default: 4)")
    group.add_argument("--alpha", type=float, default=1., help="pgd step size in /255 units (default: 1)")
    group.add_argument("--steps", type=int, default=20, help="pgd iterations (default: 20)")
    group.add_argument("--out", required=True, help="result CSV")
    _add_common(p)

    p = sub.add_parser("fourier", help="Fourier basis sensitivity heat map")
    group = p.add_argument_group("heat map")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--data", required=True, help="evaluation data")
    group.add_argument("--r", type=float, default=DEFAULT_NORM_FRACTION,
                       help="perturbation norm as a fraction of the image norm (default: 0.1)")
    group.add_argument("--workers", type=int, default=1, help="threads across cells (default: 1)")
    group.add_argument("--out", required=True, help="output prefix (<out>.csv, <out>.pgm)")
    _add_common(p)

    p = sub.add_parser("gradviz", help="normalized input-gradient images")
    group = p.add_argument_group("gradient visualization")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--data", required=True, help="evaluation data")
    group.add_argument("--index", type=int, nargs="+", default=[0], help="example indices (default: 0)")
    group.add_argument("--out", required=True, help="output prefix (<out>_<index>.pgm/.ppm)")
    _add_common(p)

    p = sub.add_parser("theory-check", help="empirical perturbation and generalization bound probes")
    group = p.add_argument_group("perturbation bound")
    group.add_argument("--model", required=True, help="checkpoint directory")
    group.add_argument("--data", required=True, help="anchor data")
    group.add_argument("--anchors", type=int, default=50, help="number of random anchors (default: 50)")
    group.add_argument("--radius", type=float, default=1., help="logit search radius (default: 1.0)")
    group.add_argument("--samples", type=int, default=256, help="neighbourhood samples (default: 256)")
    group.add_argument("--slack", type=float, default=1e-3, help="maximizer slack (default: 0.001)")
    group.add_argument("--ascent-steps", type=int, default=100, help="maximizer ascent steps (default: 100)")
    group.add_argument("--out", required=True, help="per-anchor CSV")
    group = p.add_argument_group("generalization bound (evaluated when --gamma is given)")
    group.add_argument("--gamma", type=float, default=None, help="cover radius")
    group.add_argument("--lam", type=float, default=None, help="surrogate penalty λ (must exceed L1)")
    group.add_argument("--p", type=float, default=0.05, help="failure probability (default: 0.05)")
    group.add_argument("--pairs", type=int, default=10000, help="input pairs for constant estimates (default: 10000)")
    for name in ("M0", "M1", "L0", "L1"):
        group.add_argument("--" + name, type=float, default=None, help="{} (estimated if omitted)".format(name))
    group.add_argument("--bound-out", default=None, help="bound summary file (key=value)")
    _add_common(p)

    p = sub.add_parser("report", help="robustness table over several checkpoints")
    group = p.add_argument_group("report")
    group.add_argument("--models", nargs="+", required=True, help="checkpoint directories")
    group.add_argument("--data", required=True, help="evaluation data")
    group.add_argument("--eps", type=float, nargs="+", default=[4., 8., 12.],
                       help="budgets in /255 units (default: 4 8 12)")
    group.add_argument("--alpha", type=float, default=1., help="pgd step size in /255 units (default: 1)")
    group.add_argument("--cw-steps", type=int, default=100, help="C&W iterations, 0 disables (default: 100)")
    group.add_argument("--c", type=float, default=500., help="C&W constant (default: 500)")
    group.add_argument("--baseline", default=None, help="baseline checkpoint for mCE")
    group.add_argument("--suite", default=None, help="suite directory for mCE")
    group.add_argument("--out", required=True, help="report CSV")
    _add_common(p)

    p = sub.add_parser("gen-data", help="write a generated or converted dataset")
    group = p.add_argument_group("dataset")
    group.add_argument("--data", required=True,
                       help="generator spec (shapes:n=..,size=..,seed=.. or blobs:n=..,d=..,classes=..,"
                            "separation=..,seed=..) or idx:<img>,<lbl>")
    group.add_argument("--split", default="train", help="split tag (default: train)")
    group.add_argument("--out", required=True, help="PDAD file")
    verbosity_args(p)

    p = sub.add_parser("ablate-k", help="PDA accuracy and cost for several progressive step counts")
    group = p.add_argument_group("ablation")
    group.add_argument("--plan", required=True, help="pda plan file")
    group.add_argument("--data", required=True, help="training data")
    group.add_argument("--eval-data", required=True, help="evaluation data")
    group.add_argument("--ks", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6], help="step counts (default: 1..6)")
    group.add_argument("--out", required=True, help="result CSV")
    p.add_argument("--seed", type=int, default=None, help="override the plan seed")
    verbosity_args(p)

    return parser


def _model_name(directory: str) -> str:
    return read_checkpoint_manifest(directory).get("name", os.path.basename(os.path.normpath(directory)))


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _attack_spec(args: Namespace, eps: float, seed: int, clip: bool = True) -> AttackSpec:
    return AttackSpec(args.attack, norm=parse_norm(args.norm), eps=eps_from_255(eps), alpha=eps_from_255(args.alpha),
                      steps=args.steps, c=args.c, lr=args.lr, random_init=args.random_init, seed=seed, clip=clip)


def _load_plan(args: Namespace) -> TrainPlan:
    plan = TrainPlan.from_config(args.plan)
    if args.seed is not None:
        plan.seed = args.seed
    return plan


# ---------------------------------------------------------------------------------------------------------------------
# subcommands

def run_train(args: Namespace) -> int:
    plan = _load_plan(args)
    data = resolve_dataset(args.data, "train")
    eval_data = resolve_dataset(args.eval_data, "test") if args.eval_data else None
    model = build_model(plan.arch, data.input_shape, data.num_classes, seed=derive_seed(plan.seed, "init"))
    model, history = train(model, data, plan, eval_data)
    save_checkpoint(model, args.out, epoch=plan.epochs, extra={"name": plan.name, "strategy": plan.strategy})
    history.write_csv(os.path.join(args.out, "history.csv"))
    print("{}: clean accuracy {:.4f}".format(plan.name, history.records[-1].clean_acc))
    return 0


def run_attack_eval(args: Namespace) -> int:
    model = load_checkpoint(args.model)
    data = resolve_dataset(args.data, "test")
    _ensure_parent(args.out)
    rows = []
    for eps in args.eps:
        result = evaluate_attack(model, data.images, data.labels, _attack_spec(args, eps, args.seed, data.bounded))
        rows.append([result.attack, result.eps, result.clean_accuracy, result.adversarial_accuracy, result.mean_l2,
                     result.mean_linf, result.count])
        print("{} eps={:g}/255: adversarial accuracy {:.4f}".format(result.attack, eps, result.adversarial_accuracy))
    write_csv(args.out, ["attack", "eps", "clean_accuracy", "adversarial_accuracy", "mean_l2", "mean_linf", "count"],
              rows)
    return 0


def run_corrupt(args: Namespace) -> int:
    data = resolve_dataset(args.data, "test")
    entries = build_corruption_suite(data, args.kinds, args.seed, args.out, args.workers)
    print("{} sub-datasets of {} images written to {}".format(len(entries), len(data), args.out))
    return 0


def run_eval_corruption(args: Namespace) -> int:
    suite = load_corruption_suite(args.suite)
    model_table = evaluate_error_table(load_checkpoint(args.model), suite, _model_name(args.model))
    base_table = evaluate_error_table(load_checkpoint(args.baseline), suite, _model_name(args.baseline))
    report = build_report(model_table, base_table)
    _ensure_parent(args.out)
    write_report_csv(args.out, report)
    print("mCE {:.4f}, relative mCE {:.4f}".format(report.mce, report.relative_mce))
    return 0


def run_mixed_test(args: Namespace) -> int:
    model = load_checkpoint(args.model)
    suite = load_corruption_suite(args.suite)
    clean = suite.clean
    spec = AttackSpec("pgd", eps=eps_from_255(args.eps), alpha=eps_from_255(args.alpha), steps=args.steps,
                      seed=derive_seed(args.seed, "mixed/attack"))
    adversarial = clean.with_images(attack_dataset(model, clean.images, clean.labels, spec),
                                    "{} | {}".format(clean.provenance, spec.label))
    corrupted = category_set(suite, args.category)
    accuracy = mixed_test(model, clean, adversarial, corrupted, args.seed)
    parts = [1. - error_rate(predict(model, d.images), d.labels) for d in (clean, adversarial, corrupted)]
    _ensure_parent(args.out)
    write_csv(args.out, ["model", "category", "eps", "clean_acc", "adversarial_acc", "corrupted_acc", "mixed_acc"],
              [[_model_name(args.model), args.category, spec.eps] + parts + [accuracy]])
    print("mixed accuracy {:.4f}".format(accuracy))
    return 0


def run_fourier(args: Namespace) -> int:
    model = load_checkpoint(args.model)
    data = resolve_dataset(args.data, "test")
    heatmap = fourier_heatmap(model, data, args.r, args.seed, args.workers)
    _ensure_parent(args.out)
    write_matrix_csv(args.out + ".csv", heatmap)
    write_pgm(args.out + ".pgm", scale_to_u8(heatmap))
    print("heat map written to {}.csv / {}.pgm".format(args.out, args.out))
    return 0


def run_gradviz(args: Namespace) -> int:
    model = load_checkpoint(args.model)
    data = resolve_dataset(args.data, "test")
    _ensure_parent(args.out)
    for index in args.index:
        if not 0 <= index < len(data):
            raise IndexError("example index {} outside [0, {})".format(index, len(data)))
        image = grad_visualization(model, data.images[index], data.labels[index])
        path = write_image("{}_{}".format(args.out, index), image)
        logger.info("wrote {}".format(path))
    return 0


def run_theory_check(args: Namespace) -> int:
    model = load_checkpoint(args.model)
    data = resolve_dataset(args.data, "test")
    probe = BoundProbe(args.slack, args.radius, args.samples, args.ascent_steps, args.seed)
    anchors = rng_for(args.seed, "anchors").permutation(len(data))[:args.anchors]
    rows = []
    holds = failures = skipped = 0
    for i in anchors:
        result = perturbation_bound_check(model, data.images[i], int(data.labels[i]), probe)
        if result.applicable:
            holds += int(result.holds)
            failures += int(not result.holds)
        else:
            skipped += 1
        rows.append([int(i), int(data.labels[i]), result.lhs, result.rhs, result.C, result.K,
                     "" if result.holds is None else str(result.holds).lower()])
    _ensure_parent(args.out)
    write_csv(args.out, ["index", "label", "lhs", "rhs", "C", "K", "holds"], rows)
    print("perturbation bound holds on {} anchors, fails on {}, not applicable on {}".format(holds, failures,
                                                                                            skipped))

    if args.gamma is not None:
        if args.lam is None:
            raise ValueError("--lam is required with --gamma")
        given = {name: getattr(args, name) for name in ("M0", "M1", "L0", "L1")}
        if any(v is None for v in given.values()):
            estimated = estimate_constants(model, data.images, data.labels, args.pairs, args.seed)
            given = {name: getattr(estimated, name) if v is None else v for name, v in given.items()}
        empirical = float(np.mean(per_example_losses(model, data.images, data.labels)))
        bound = generalization_bound_from_points(data.images, empirical, args.gamma, args.lam, given["M0"], given["M1"],
                                                 given["L0"], given["L1"], args.p)
        print("generalization bound {:.6f} (empirical loss {:.6f})".format(bound, empirical))
        if args.bound_out:
            write_config(args.bound_out, dict(empirical_loss="{:.6f}".format(empirical), bound="{:.6f}".format(bound),
                                              gamma=args.gamma, lam=args.lam, p=args.p, n=len(data),
                                              **{k: "{:.6f}".format(v) for k, v in given.items()},
                                              constants="empirical, not certified"))
    return 0


def run_report(args: Namespace) -> int:
    data = resolve_dataset(args.data, "test")
    suite = load_corruption_suite(args.suite) if args.suite else None
    if (suite is None) != (args.baseline is None):
        raise ValueError("--baseline and --suite go together")
    base_table = evaluate_error_table(load_checkpoint(args.baseline), suite, _model_name(args.baseline)) \
        if suite is not None else None
    header = ["model", "clean_acc"]
    header += ["FGSM_{:g}".format(e) for e in args.eps] + ["PGD20_{:g}".format(e) for e in args.eps]
    header += ["CW_L2", "CW_mean_l2"] if args.cw_steps > 0 else []
    header += ["mCE", "relative_mCE"] if suite is not None else []
    rows = []
    for directory in args.models:
        model = load_checkpoint(directory)
        name = _model_name(directory)
        row = [name, float(np.mean(predict(model, data.images) == data.labels))]
        for e in args.eps:
            spec = AttackSpec("fgsm", eps=eps_from_255(e), clip=data.bounded)
            row.append(evaluate_attack(model, data.images, data.labels, spec).adversarial_accuracy)
        for e in args.eps:
            spec = AttackSpec("pgd", eps=eps_from_255(e), alpha=eps_from_255(args.alpha), steps=20,
                              seed=derive_seed(args.seed, "report/{}".format(e)), clip=data.bounded)
            row.append(evaluate_attack(model, data.images, data.labels, spec).adversarial_accuracy)
        if args.cw_steps > 0:
            result = evaluate_attack(model, data.images, data.labels,
                                     AttackSpec("cw_l2", c=args.c, steps=args.cw_steps, clip=data.bounded))
            row += [result.adversarial_accuracy, result.mean_l2]
        if suite is not None:
            report = build_report(evaluate_error_table(model, suite, name), base_table)
            row += [report.mce, report.relative_mce]
        rows.append(row)
    _ensure_parent(args.out)
    write_csv(args.out, header, rows)
    print("report for {} models written to {}".format(len(rows), args.out))
    return 0


def run_gen_data(args: Namespace) -> int:
    dataset = resolve_dataset(args.data, args.split)
    _ensure_parent(args.out)
    write_dataset(args.out, dataset)
    print("{} examples, {} classes, input shape {}".format(len(dataset), dataset.num_classes, dataset.input_shape))
    return 0


def run_ablate_k(args: Namespace) -> int:
    plan = _load_plan(args)
    data = resolve_dataset(args.data, "train")
    eval_data = resolve_dataset(args.eval_data, "test")

    def build():
        return build_model(plan.arch, data.input_shape, data.num_classes, seed=derive_seed(plan.seed, "init"))

    rows = ablate_k(build, data, eval_data, plan, args.ks)
    _ensure_parent(args.out)
    write_csv(args.out, ["k", "clean_acc", "attack_acc", "wall_ms_per_epoch"],
              [[r.k, r.clean_acc, r.attack_acc, r.wall_ms_per_epoch] for r in rows])
    return 0


COMMANDS = {
    "train": run_train,
    "attack-eval": run_attack_eval,
    "corrupt": run_corrupt,
    "eval-corruption": run_eval_corruption,
    "mixed-test": run_mixed_test,
    "fourier": run_fourier,
    "gradviz": run_gradviz,
    "theory-check": run_theory_check,
    "report": run_report,
    "gen-data": run_gen_data,
    "ablate-k": run_ablate_k,
}  # type: Dict[str, Callable[[Namespace], int]]


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse `argv` (default: sys.argv[1:]) and run the subcommand.

    :return: 0 on success, 1 on runtime errors, 2 on usage errors
    """
    try:
        args = get_argparser().parse_args(argv)
    except UsageExit as e:
        return e.status
    init_logger_from_args(args)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        logger.error("{} failed: {}".format(args.command, e))
        logger.debug("traceback", exc_info=True)
        return 1


def main():
    sys.exit(cli_dispatch())


def _subcommand_main(command: str) -> Callable[[], None]:
    def run():
        sys.exit(cli_dispatch([command] + sys.argv[1:]))
    return run


train_main = _subcommand_main("train")
attack_eval_main = _subcommand_main("attack-eval")
corrupt_main = _subcommand_main("corrupt")
fourier_main = _subcommand_main("fourier")
theory_check_main = _subcommand_main("theory-check")


if __name__ == "__main__":
    main()
