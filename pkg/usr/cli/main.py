"""
If someone calls `usr` or `python3 -m usr` this is called!
"""
import sys
from os import makedirs
from os.path import basename, isfile, join, splitext, dirname

from tabulate import tabulate
from twisted.logger import Logger

from usr.checkpoint import save_checkpoint, load_checkpoint
from usr.cli.common import UsageParser, positive_int, format_default, env_flag, nested
from usr.config import RunConfig, TrainConfig
from usr.constants import (DEFAULT_LOG_LEVEL, DEFAULT_SEED, DEFAULT_CHECKPOINT_NAME, DEFAULT_RUN_CONFIG_NAME,
                           DEFAULT_THREADS_ENV, VARIANTS, MODE_BLUR_NOISE_JPEG, MODE_BLUR_NOISE, MODE_BLUR_JPEG,
                           MODE_HIGH_ORDER)
from usr.dataset import save_dataset, load_dataset, load_images, build_dataset
from usr.degrade import preset, synth_dataset, degrade_dataset
from usr.errors import UsrError, UsageError, TrainingAborted, EXIT_OK, EXIT_USAGE
from usr.eval import evaluate_quality, stability_report, cluster_model, ablation_run
from usr.gradcheck import MODULES, run_suite, require_pass
from usr.imageio import read_ppm, write_ppm
from usr.log import start_logging
from usr.model import USRModel
from usr.report import emit_report, format_table, format_quality
from usr.train import Trainer

log = Logger('usr')

SYNTH_COMMAND = 'synth'
DEGRADE_COMMAND = 'degrade'
TRAIN_COMMAND = 'train'
SR_COMMAND = 'sr'
EVAL_COMMAND = 'eval'
STABILITY_COMMAND = 'stability'
CLUSTER_COMMAND = 'cluster'
GRADCHECK_COMMAND = 'gradcheck'
CONFIG_COMMAND = 'config'
ABLATION_COMMAND = 'ablation'

MODES = (MODE_BLUR_NOISE_JPEG, MODE_BLUR_NOISE, MODE_BLUR_JPEG, MODE_HIGH_ORDER)
STAGES = ('1', '2', '3', 'all')


# -- helpers -----------------------------------------------------------------------


def resolve_config(args, **overrides) -> RunConfig:
    """
    Document named by --config (or the defaults) with the flags layered on top
    """
    run = RunConfig(getattr(args, 'config', None), nested(seed=getattr(args, 'seed', None), **overrides))
    log.info('resolved configuration (seed {seed}):\n{config}', seed=run.config['seed'], config=run.to_json())
    return run


def echo_config(run: RunConfig, directory: str):
    makedirs(directory or '.', exist_ok=True)
    with open(join(directory, DEFAULT_RUN_CONFIG_NAME), 'w') as fp:
        fp.write(run.to_json() + '\n')


def threads(args) -> int | None:
    return getattr(args, 'threads', None)


def load_model(path: str, run: RunConfig) -> USRModel:
    model = USRModel(TrainConfig.from_run_config(run.config))
    load_checkpoint(path, model)
    return model


def image_name(path: str) -> str:
    return splitext(basename(path))[0]


# -- commands ----------------------------------------------------------------------


def cli_synth(args):
    run = resolve_config(args, sr={'scale': args.scale},
                         data={'count': args.count, 'size': args.size, 'mode': args.mode})
    conf = run.config
    spec = preset(conf['data']['mode'], int(conf['sr']['scale']))
    samples = synth_dataset(int(conf['data']['count']), int(conf['data']['size']), spec, int(conf['seed']),
                            threads(args))
    save_dataset(samples, args.out)
    echo_config(run, args.out)
    print(f'{len(samples)} pairs written to "{args.out}"')


def cli_degrade(args):
    run = resolve_config(args, sr={'scale': args.scale}, data={'mode': args.mode})
    conf = run.config
    spec = preset(conf['data']['mode'], int(conf['sr']['scale']))
    samples = degrade_dataset(load_images(args.input), spec, int(conf['seed']), threads(args))
    save_dataset(samples, args.out)
    echo_config(run, args.out)
    print(f'{len(samples)} pairs written to "{args.out}"')


def cli_train(args):
    run = resolve_config(args, train={'variant': args.variant, 'steps': args.steps},
                         data={'directory': args.dataset})
    cfg = TrainConfig.from_run_config(run.config)
    if args.stage in ('2', '3') and not args.ckpt_in:
        raise UsageError(f'stage {args.stage} continues from a checkpoint, give --ckpt-in')

    model = USRModel.initialized(cfg)
    if args.ckpt_in:
        load_checkpoint(args.ckpt_in, model)
    data = build_dataset(run.config, cfg.seed, cfg.sr.scale)
    trainer = Trainer(cfg, data, model)
    metrics_path = args.metrics or splitext(args.ckpt_out)[0] + '.metrics.csv'
    echo_config(run, dirname(args.ckpt_out))

    try:
        ckpt = trainer.run_all() if args.stage == 'all' else trainer.run(int(args.stage))
    except TrainingAborted as e:
        if e.checkpoint is not None:
            save_checkpoint(e.checkpoint, args.ckpt_out)
            log.warn('last finite parameters saved to {path}', path=args.ckpt_out)
        trainer.metrics.save(metrics_path)
        raise

    save_checkpoint(ckpt, args.ckpt_out)
    trainer.metrics.save(metrics_path)
    print(f'checkpoint written to "{args.ckpt_out}", metrics to "{metrics_path}"')


def cli_sr(args):
    run = resolve_config(args, train={'variant': args.variant})
    model = load_model(args.ckpt, run)
    write_ppm(model.super_resolve(read_ppm(args.input)), args.out)
    print(f'super-resolved image written to "{args.out}"')


def cli_eval(args):
    run = resolve_config(args, train={'variant': args.variant})
    model = load_model(args.ckpt, run)
    report = evaluate_quality(model, load_dataset(args.dataset), baseline=not args.no_baseline,
                              threads=threads(args))
    if args.report:
        emit_report(report, args.report)
    print(format_quality(report))


def cli_stability(args):
    run = resolve_config(args, train={'variant': args.variant})
    model = load_model(args.ckpt, run)
    images = [(image_name(path), read_ppm(path)) for path in args.image]
    report = stability_report(model.representation, images, args.patches, args.patch_size,
                              int(run.config['seed']))
    if args.report:
        emit_report(report, args.report)
    print(format_table(report, floatfmt='.6g'))
    print(f'\ninstability score: {report.score:.6g}')


def cli_cluster(args):
    run = resolve_config(args, train={'variant': args.variant})
    samples = load_dataset(args.dataset)
    report = cluster_model(load_model(args.ckpt, run), samples, threads(args))
    if args.report:
        emit_report(report, args.report)
    if args.svg:
        emit_report(report, args.svg, fmt='svg')
    rows = [[args.ckpt, report.silhouette]]
    if args.compare:
        rows.append([args.compare, cluster_model(load_model(args.compare, run), samples, threads(args)).silhouette])
    print(tabulate(rows, headers=['checkpoint', 'silhouette'], floatfmt='.4f'))


def cli_gradcheck(args):
    results = run_suite(args.module, args.seed if args.seed is not None else DEFAULT_SEED)
    print(tabulate([[r.module, r.name, f'{r.error:.3e}', 'ok' if r.passed else 'FAIL'] for r in results],
                   headers=['module', 'case', 'max rel error', 'status']))
    require_pass(results)


def cli_config(args):
    run = RunConfig(args.config, nested(seed=args.seed))
    contents = run.to_json() if args.json else str(run)

    if args.save:
        if not isfile(args.save) or args.overwrite:
            with open(args.save, 'w') as fp:
                fp.write(contents)
                print(f'Configuration written to: "{args.save}"')
        else:
            print(f'Configuration already exists at "{args.save}", use --overwrite to replace')
    else:
        print(contents)


def cli_ablation(args):
    run = resolve_config(args, train={'steps': args.steps}, data={'directory': args.dataset})
    cfg = TrainConfig.from_run_config(run.config)
    data = build_dataset(run.config, cfg.seed, cfg.sr.scale)
    if args.heldout:
        heldout = load_dataset(args.heldout)
    else:
        # held-out pairs use the next seed
        conf = run.config['data']
        heldout = synth_dataset(args.heldout_count, int(conf['size']), preset(conf['mode'], cfg.sr.scale),
                                cfg.seed + 1, threads(args))
    rows = ablation_run(args.variants, cfg, data, heldout, args.n_vddc, threads(args))
    emit_report(rows, args.report)
    print(format_table(rows))


COMMANDS = {
    SYNTH_COMMAND: cli_synth,
    DEGRADE_COMMAND: cli_degrade,
    TRAIN_COMMAND: cli_train,
    SR_COMMAND: cli_sr,
    EVAL_COMMAND: cli_eval,
    STABILITY_COMMAND: cli_stability,
    CLUSTER_COMMAND: cli_cluster,
    GRADCHECK_COMMAND: cli_gradcheck,
    CONFIG_COMMAND: cli_config,
    ABLATION_COMMAND: cli_ablation,
}


# -- parser ------------------------------------------------------------------------


def add_run_arguments(parser, threaded: bool = False):
    parser.add_argument(
        '--config',
        metavar='PATH',
        help='Run configuration (YAML or JSON), if not specified the defaults are used'
    )
    parser.add_argument(
        '--seed',
        type=int,
        help=f'Seed every random stream derives from, overrides the configuration '
             f'(default={format_default(DEFAULT_SEED)})'
    )
    if threaded:
        parser.add_argument(
            '--threads',
            type=positive_int,
            default=env_flag(DEFAULT_THREADS_ENV, positive_int),
            help=f'Worker threads for per-image work, results do not depend on it (${DEFAULT_THREADS_ENV} caps it)'
        )


def add_model_arguments(parser, required: bool = True):
    parser.add_argument('--ckpt', metavar='PATH', required=required, help='Checkpoint to load')
    parser.add_argument('--variant', choices=VARIANTS, help='Model variant the checkpoint was trained as')


def build_parser() -> UsageParser:
    parser = UsageParser('usr', description='Blind super-resolution with uncertainty-based degradation '
                                            'representations')
    parser.add_argument(
        '--debug',
        action='store_true',
        help='Debug logging'
    )
    subparsers = parser.add_subparsers(dest='command')

    # /////////////////////////////////////////////////////////////////////////
    # ////////////////////////////   DATA   ///////////////////////////////////

    synth = subparsers.add_parser(SYNTH_COMMAND, help='Generate a procedural HR/LR dataset')
    add_run_arguments(synth, threaded=True)
    synth.add_argument('--count', type=positive_int, help='Number of image pairs')
    synth.add_argument('--size', type=positive_int, help='HR image side in pixels, a multiple of the scale')
    synth.add_argument('--mode', choices=MODES, help='Degradation preset')
    synth.add_argument('--scale', type=positive_int, help='Downsampling factor')
    synth.add_argument('--out', metavar='DIR', required=True, help='Output dataset directory')

    degrade = subparsers.add_parser(DEGRADE_COMMAND, help='Degrade a directory of HR images')
    add_run_arguments(degrade, threaded=True)
    degrade.add_argument('--in', dest='input', metavar='DIR', required=True, help='Directory of HR .ppm images')
    degrade.add_argument('--mode', choices=MODES, help='Degradation preset')
    degrade.add_argument('--scale', type=positive_int, help='Downsampling factor')
    degrade.add_argument('--out', metavar='DIR', required=True, help='Output dataset directory')

    # /////////////////////////////////////////////////////////////////////////
    # ///////////////////////////   TRAINING   ////////////////////////////////

    train = subparsers.add_parser(TRAIN_COMMAND, help='Run training stages')
    add_run_arguments(train)
    train.add_argument('--stage', choices=STAGES, default='all', help='Stage to run, default="all"')
    train.add_argument('--variant', choices=VARIANTS, help='Ablation variant')
    train.add_argument('--steps', type=int, nargs=3, metavar='N', help='Steps of stage 1, 2 and 3')
    train.add_argument('--dataset', metavar='DIR', help='Dataset directory, procedural data otherwise')
    train.add_argument('--ckpt-in', metavar='PATH', help='Checkpoint to continue from')
    train.add_argument('--ckpt-out', metavar='PATH', default=DEFAULT_CHECKPOINT_NAME,
                       help=f'Checkpoint to write, default={format_default(DEFAULT_CHECKPOINT_NAME)}')
    train.add_argument('--metrics', metavar='PATH', help='Per-step metrics CSV, default next to --ckpt-out')

    ablation = subparsers.add_parser(ABLATION_COMMAND, help='Train and score several variants / depths')
    add_run_arguments(ablation, threaded=True)
    ablation.add_argument('--variants', choices=VARIANTS, nargs='+', default=list(VARIANTS),
                          help=f'Variants to train, default={format_default(VARIANTS)}')
    ablation.add_argument('--n-vddc', type=positive_int, nargs='+', help='Network depths to sweep')
    ablation.add_argument('--steps', type=int, nargs=3, metavar='N', help='Steps of stage 1, 2 and 3')
    ablation.add_argument('--dataset', metavar='DIR', help='Training dataset directory')
    ablation.add_argument('--heldout', metavar='DIR', help='Held-out dataset directory')
    ablation.add_argument('--heldout-count', type=positive_int, default=16,
                          help='Procedural held-out pairs when --heldout is not given, default=16')
    ablation.add_argument('--report', metavar='PATH', required=True, help='Output CSV')

    # /////////////////////////////////////////////////////////////////////////
    # /////////////////////////////////////////////////////////////////////////
    # ///////////////////////////   INFERENCE   ///////////////////////////////

    sr = subparsers.add_parser(SR_COMMAND, help='Super-resolve one image')
    add_run_arguments(sr)
    add_model_arguments(sr)
    sr.add_argument('--in', dest='input', metavar='IMG', required=True, help='LR .ppm image')
    sr.add_argument('--out', metavar='IMG', required=True, help='Output .ppm image')

    # /////////////////////////////////////////////////////////////////////////
    # ///////////////////////////   EVALUATION   //////////////////////////////

    evaluate = subparsers.add_parser(EVAL_COMMAND, help='PSNR / SSIM over a dataset directory')
    add_run_arguments(evaluate, threaded=True)
    add_model_arguments(evaluate)
    evaluate.add_argument('--dataset', metavar='DIR', required=True, help='Dataset directory (hr/, lr/)')
    evaluate.add_argument('--report', metavar='PATH', help='Per-image CSV report')
    evaluate.add_argument('--no-baseline', action='store_true', help='Skip the bicubic baseline')

    stability = subparsers.add_parser(STABILITY_COMMAND, help='Representation variance across random patches')
    add_run_arguments(stability)
    add_model_arguments(stability)
    stability.add_argument('--image', metavar='IMG', nargs='+', required=True, help='LR .ppm image(s)')
    stability.add_argument('--patches', type=positive_int, default=16, help='Patches per image, default=16')
    stability.add_argument('--patch-size', type=positive_int, default=32, help='Patch side, default=32')
    stability.add_argument('--report', metavar='PATH', help='Per-image CSV report')

    cluster = subparsers.add_parser(CLUSTER_COMMAND, help='Separability of representations by degradation mode')
    add_run_arguments(cluster, threaded=True)
    add_model_arguments(cluster)
    cluster.add_argument('--dataset', metavar='DIR', required=True, help='Dataset directory with records/')
    cluster.add_argument('--report', metavar='PATH', help='Per-sample CSV report')
    cluster.add_argument('--svg', metavar='PATH', help='PCA scatter plot')
    cluster.add_argument('--compare', metavar='PATH', help='Second checkpoint to score on the same samples')

    gradcheck = subparsers.add_parser(GRADCHECK_COMMAND, help='Verify analytic gradients numerically')
    gradcheck.add_argument('--module', choices=MODULES, default='all', help='Suite to run, default="all"')
    gradcheck.add_argument('--seed', type=int, help=f'Seed of the random inputs, default={DEFAULT_SEED}')

    # /////////////////////////////////////////////////////////////////////////
    # /////////////////////////////////////////////////////////////////////////

    config = subparsers.add_parser(CONFIG_COMMAND, help='Show the resolved run configuration')
    config.add_argument(
        '--config',
        metavar='PATH',
        help='Config path, if not specified the default configuration is returned'
    )
    config.add_argument('--seed', type=int, help='Seed override')
    config.add_argument(
        '--json',
        action='store_true',
        help='format as JSON instead of Yaml (default)'
    )
    config.add_argument(
        '--save',
        metavar='PATH',
        help='Save the configuration to this path'
    )
    config.add_argument(
        '--overwrite',
        action='store_true',
        help='Overwrite a file that already exists when using --save'
    )
    return parser


def main(argv=None):
    argv = sys.argv if argv is None else argv
    try:
        parser = build_parser()
        args = parser.parse_args(argv[1:])
        start_logging('debug' if args.debug else DEFAULT_LOG_LEVEL)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        COMMANDS[args.command](args)
    except UsrError as e:
        print(f'usr: {e}', file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main(sys.argv))
