# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""Command line interface.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors (unreadable or malformed inputs),
3 on numerical failures (solver non-convergence, divergence, failed gradient check).
"""

import argparse
import logging
import os
import sys
import numpy as np
from .cli_io import (format_number, prediction_path, read_box_document, read_eval_document, read_refine_config,
                     read_tensor, write_box_document, write_json, write_tensor, write_trace_csv)
from .discovery import lost_discover, move_box, tokencut_discover
from .geometry import Box, PredBox, ScoredBox
from .heatmap import enclosing_prediction_box, extract_boxes
from .matching import finite_diff_check, loss_h, loss_h_bu
from .metrics import EvalSample, METRICS, evaluate
from .refinesim import render, run_demo
from .utilities import NumericalError, SplitMix64, check_rng

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage mistakes surface as exit code 1 instead of argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(key, value):
    print('{0} {1}'.format(key, format_number(value) if isinstance(value, (float, np.floating)) else value))


def _cmd_extract_boxes(args):
    M = read_tensor(args.heatmap)
    if M.ndim != 2:
        raise ValueError("A heatmap tensor must be 2-D, got shape {0}.".format(M.shape))
    height, width = M.shape
    boxes = extract_boxes(M) if args.mode == 'train' else [enclosing_prediction_box(M)]
    write_box_document(args.out, boxes, width, height, {'mode': args.mode})
    _emit('boxes', len(boxes))


def _cmd_loss(args):
    targets = [e.to_scored() for e in read_box_document(args.targets).entries]
    preds = [e.to_pred() for e in read_box_document(args.preds).entries]
    if args.union_prob is None:
        breakdown, _ = loss_h(targets, preds, args.k)
        used_union = False
    else:
        breakdown, used_union = loss_h_bu(targets, preds, args.k, rng=args.seed, union_prob=args.union_prob)
    for key in ('cls', 'box', 'giou', 'total'):
        _emit(key, getattr(breakdown, key))
    _emit('union', str(used_union).lower())


def _write_discovery(path, result, extra):
    rows, cols = result.grid_shape
    metadata = dict(extra, selected=' '.join(str(i) for i in result.selected))
    write_box_document(path, result.to_boxset(), cols, rows, metadata)
    for key, value in zip(('cx', 'cy', 'w', 'h'), result.box):
        _emit(key, value)


def _read_features(path):
    F = read_tensor(path)
    if F.ndim != 3:
        raise ValueError("A feature tensor must be 3-D, got shape {0}.".format(F.shape))
    return F


def _cmd_lost(args):
    result = lost_discover(_read_features(args.features), args.a)
    _write_discovery(args.out, result, {'method': 'lost', 'seed': str(result.seed)})


def _cmd_tokencut(args):
    result = tokencut_discover(_read_features(args.features), args.tau, args.eps)
    _write_discovery(args.out, result, {'method': 'tokencut'})


def _cmd_move(args):
    M = read_tensor(args.heatmap)
    if M.ndim != 2:
        raise ValueError("A heatmap tensor must be 2-D, got shape {0}.".format(M.shape))
    box = move_box(M)
    write_box_document(args.out, [ScoredBox(box, 1.0)], M.shape[1], M.shape[0], {'method': 'move'})
    for key, value in zip(('cx', 'cy', 'w', 'h'), box):
        _emit(key, value)


def _load_predictions(preds, ids):
    if os.path.isdir(preds):
        return [read_tensor(prediction_path(preds, sample_id)) for sample_id in ids]
    documents = read_eval_document(preds)
    missing = [i for i in ids if i not in documents]
    if missing:
        raise ValueError("No prediction for sample(s) {0}.".format(missing))
    out = []
    for sample_id in ids:
        entries = documents[sample_id]
        if len(entries) != 1:
            raise ValueError("Sample {0!r} needs exactly one predicted box, got {1}.".format(sample_id, len(entries)))
        out.append(entries[0].box)
    return out


def _cmd_eval(args):
    ground_truth = read_eval_document(args.gt)
    ids = list(ground_truth)
    predictions = _load_predictions(args.preds, ids)
    samples = [EvalSample(p, [e.box for e in ground_truth[i]], i) for p, i in zip(predictions, ids)]
    report = evaluate(samples, args.metric, n_jobs=args.n_jobs)
    _emit('metric', report.metric)
    _emit('hits', report.hits)
    _emit('total', report.total)
    _emit('accuracy', float(report.accuracy))
    if report.failures:
        _emit('empty_predictions', ' '.join(report.failures))


def _cmd_refine_demo(args):
    config = read_refine_config(args.config)
    result = run_demo(config.blobs, config.width, config.height, config.teacher, config.target_blobs,
                      config.n_train, config.schedule, config.reg_weight, config.union_prob)
    os.makedirs(args.out, exist_ok=True)
    write_trace_csv(os.path.join(args.out, 'trace.csv'), result.trace)
    write_tensor(os.path.join(args.out, 'refined.bbr'), render(result.params, config.width, config.height))
    write_box_document(os.path.join(args.out, 'teacher.json'), result.teacher, config.width, config.height)
    summary = {
        'calibration': {'scales': [float(format_number(v)) for v in result.calibration.scales],
                        'offsets': [float(format_number(v)) for v in result.calibration.offsets]},
        'params': [[float(format_number(v)) for v in row] for row in result.params],
        'initial_iou': float(format_number(result.initial_iou)),
        'refined_iou': float(format_number(result.refined_iou)),
        'initial_loss': float(format_number(result.trace.total[0])) if len(result.trace.total) else None,
        'final_loss': float(format_number(result.trace.total[-1])) if len(result.trace.total) else None,
    }
    write_json(os.path.join(args.out, 'summary.json'), summary)
    for key in ('initial_loss', 'final_loss', 'initial_iou', 'refined_iou'):
        if summary[key] is not None:
            _emit(key, summary[key])


def random_configuration(rng, max_k=6):
    """Draw a random (targets, predictions, k) configuration for gradient checking."""
    rng = check_rng(rng)

    def draw(low, high):
        return low + (high - low) * rng.uniform()

    def box():
        return Box(draw(0.2, 0.8), draw(0.2, 0.8), draw(0.05, 0.5), draw(0.05, 0.5))

    k = 1 + int(rng.uniform() * max_k)
    n_targets = int(rng.uniform() * (k + 1))
    targets = [ScoredBox(box(), draw(0.1, 1.0)) for _ in range(n_targets)]
    preds = [PredBox(box(), (draw(-3, 3), draw(-3, 3))) for _ in range(k)]
    return targets, preds, k


def _cmd_grad_check(args):
    rng = SplitMix64(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        targets, preds, k = random_configuration(rng)
        worst = max(worst, finite_diff_check(targets, preds, k))
    _emit('trials', args.trials)
    _emit('max_error', worst)
    if worst >= GRAD_TOLERANCE:
        raise NumericalError("Gradient check failed: max error {0} >= {1}".format(format_number(worst),
                                                                                  GRAD_TOLERANCE))


def _union_prob(text):
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return value


def build_parser():
    parser = _Parser(prog='boxrefine', description='Box extraction, matching losses, object discovery and '
                                                   'heatmap refinement')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for info, -vv for debug logging')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    p = sub.add_parser('extract-boxes', help='Extract boxes from a heatmap tensor')
    p.add_argument('--heatmap', required=True)
    p.add_argument('--mode', choices=('train', 'metric'), default='train')
    p.add_argument('--out', required=True)
    p.set_defaults(func=_cmd_extract_boxes)

    p = sub.add_parser('loss', help='Matched detection loss between two box documents')
    p.add_argument('--targets', required=True)
    p.add_argument('--preds', required=True)
    p.add_argument('--k', type=int, default=10)
    p.add_argument('--union-prob', type=_union_prob, nargs='?', const=0.5, default=None,
                   help='Use the union-box loss with this probability (default 0.5 when given bare)')
    p.add_argument('--seed', type=int, default=None)
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser('lost', help='LOST discovery on a feature tensor')
    p.add_argument('--features', required=True)
    p.add_argument('--a', type=int, default=100)
    p.add_argument('--out', required=True)
    p.set_defaults(func=_cmd_lost)

    p = sub.add_parser('tokencut', help='TokenCut discovery on a feature tensor')
    p.add_argument('--features', required=True)
    p.add_argument('--tau', type=float, default=0.2)
    p.add_argument('--eps', type=float, default=1e-5)
    p.add_argument('--out', required=True)
    p.set_defaults(func=_cmd_tokencut)

    p = sub.add_parser('move', help='Largest-component box of a segmentation tensor')
    p.add_argument('--heatmap', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=_cmd_move)

    p = sub.add_parser('eval', help='Pointing, bbox or CorLoc accuracy')
    p.add_argument('--metric', choices=METRICS, required=True)
    p.add_argument('--preds', required=True, help='Directory of <id>.bbr heatmaps or an evaluation document')
    p.add_argument('--gt', required=True)
    p.add_argument('--n-jobs', type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser('refine-demo', help='Two-phase refinement on a blob fixture')
    p.add_argument('--config', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=_cmd_refine_demo)

    p = sub.add_parser('grad-check', help='Compare analytic loss gradients with finite differences')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--trials', type=int, default=1000)
    p.set_defaults(func=_cmd_grad_check)
    return parser


def main(argv=None):
    """Run the command line and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print('boxrefine: error: {0}'.format(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s',
                        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)])
    try:
        if getattr(args, 'seed', 0) is None:
            args.seed = check_rng(None).seed
        args.func(args)
    except NumericalError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
