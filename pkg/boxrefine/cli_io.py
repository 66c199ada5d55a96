# Copyright (c) boxrefine contributors. All rights reserved.
# Licensed under the MIT License.

"""File formats used by the command line: binary tensors, JSON box documents and the demo config.

Tensor files (``.bbr``) are laid out as::

    b"BBR1" | dtype (1 byte, 0 = float32 little-endian) | ndim (1 byte) | ndim x uint32 LE dims | payload

with a row-major payload of exactly ``4 * prod(dims)`` bytes. Heatmaps are 2-D ``(height, width)``
and feature grids 3-D ``(rows, cols, d)``.

Box documents are JSON objects::

    {"schema_version": 1, "image_width": W, "image_height": H,
     "boxes": [{"cx": .., "cy": .., "w": .., "h": .., "score": .., "is_object": .., "logits": [.., ..]}],
     "metadata": {"key": "value"}}

where ``score``, ``is_object`` and ``logits`` are optional. Unknown fields are rejected.
"""

import configparser
import csv
import json
import os
import struct
from collections import namedtuple
import numpy as np
from .geometry import Box, PredBox, ScoredBox, TargetBox, as_box, clamp_box
from .refinesim import BLOB_FIELDS, Schedule
from .utilities import SchemaError, TensorFormatError, default_seed

MAGIC = b'BBR1'
DTYPE_FLOAT32 = 0
SCHEMA_VERSION = 1
_HEADER = struct.Struct('<4sBB')

BOX_FIELDS = ('cx', 'cy', 'w', 'h')
OPTIONAL_BOX_FIELDS = ('score', 'is_object', 'logits')
DOCUMENT_FIELDS = ('schema_version', 'image_width', 'image_height', 'boxes', 'metadata')
EVAL_FIELDS = ('schema_version', 'samples')
SAMPLE_FIELDS = ('id', 'boxes')

CONFIG_SECTION = 'demo'
CONFIG_DEFAULTS = {'width': 64, 'height': 64, 'blobs': None, 'target_blobs': None, 'teacher': None, 'n_train': 8,
                   'phase1_iters': 300, 'phase2_iters': 1000, 'phase1_lr': 1e-3, 'phase2_lr': 5e-4,
                   'reg_weight': 1.0, 'union_prob': 0.5, 'seed': None}


class BoxEntry(namedtuple('BoxEntry', ['box', 'score', 'is_object', 'logits'])):
    """One box of a box document; the optional fields are None when absent."""
    __slots__ = ()

    def to_scored(self):
        return ScoredBox(self.box, 1.0 if self.score is None else self.score)

    def to_pred(self):
        if self.logits is None:
            raise SchemaError("Prediction boxes need 'logits'.")
        return PredBox(self.box, self.logits)

    def to_target(self):
        return TargetBox(self.box, True if self.is_object is None else self.is_object)


BoxDocument = namedtuple('BoxDocument', ['image_width', 'image_height', 'entries', 'metadata'])
BoxDocument.__doc__ = """Decoded box document; ``entries`` is a list of :class:`BoxEntry`."""

RefineConfig = namedtuple('RefineConfig', ['width', 'height', 'blobs', 'target_blobs', 'teacher', 'n_train',
                                           'schedule', 'reg_weight', 'union_prob'])


def format_number(x):
    """Format a number with 9 significant digits."""
    return '{:.9g}'.format(x)


def _round(x):
    return float(format_number(x))


def encode_tensor(tensor):
    """Serialize an array of at most 255 dimensions as float32 tensor bytes."""
    tensor = np.asarray(tensor)
    if not 1 <= tensor.ndim <= 255:
        raise ValueError("Tensors need between 1 and 255 dimensions, got {0}.".format(tensor.ndim))
    if any(d > 0xFFFFFFFF for d in tensor.shape):
        raise ValueError("Tensor dimensions must fit in 32 bits, got {0}.".format(tensor.shape))
    payload = np.ascontiguousarray(tensor, dtype='<f4').tobytes()
    dims = struct.pack('<{0}I'.format(tensor.ndim), *tensor.shape)
    return _HEADER.pack(MAGIC, DTYPE_FLOAT32, tensor.ndim) + dims + payload


def decode_tensor(data):
    """Inverse of :func:`encode_tensor`.

    Raises
    ------
    TensorFormatError
        With code ``'bad_magic'``, ``'bad_header'``, ``'unsupported_dtype'`` or ``'truncated_payload'``.
    """
    data = bytes(data)
    if data[:4] != MAGIC:
        raise TensorFormatError('bad_magic', "expected {0!r}, got {1!r}".format(MAGIC, data[:4]))
    if len(data) < _HEADER.size:
        raise TensorFormatError('bad_header', "header ends after {0} bytes".format(len(data)))
    _, dtype, ndim = _HEADER.unpack_from(data)
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError('unsupported_dtype', "dtype code {0}".format(dtype))
    if ndim == 0:
        raise TensorFormatError('bad_header', "zero dimensions")
    start = _HEADER.size + 4 * ndim
    if len(data) < start:
        raise TensorFormatError('bad_header', "{0} dimensions announced, header truncated".format(ndim))
    dims = struct.unpack_from('<{0}I'.format(ndim), data, _HEADER.size)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = len(data) - start
    if payload < expected:
        raise TensorFormatError('truncated_payload', "expected {0} bytes, got {1}".format(expected, payload))
    if payload > expected:
        raise TensorFormatError('bad_header', "{0} trailing bytes after the payload".format(payload - expected))
    return np.frombuffer(data, dtype='<f4', offset=start).reshape(dims).astype(np.float32)


def write_tensor(path, tensor):
    """Write a tensor file; the bytes only depend on the values and the shape."""
    with open(path, 'wb') as f:
        f.write(encode_tensor(tensor))


def read_tensor(path):
    """Read a tensor file as a float32 array."""
    with open(path, 'rb') as f:
        return decode_tensor(f.read())


def _load_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError("{0} is not valid JSON: {1}".format(path, exc))


def _dump_json(path, doc):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True))
        f.write('\n')


def _check_fields(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise SchemaError("{0} must be a JSON object.".format(where))
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise SchemaError("Unknown field(s) {0} in {1}.".format(unknown, where))
    missing = [k for k in required if k not in obj]
    if missing:
        raise SchemaError("Missing field(s) {0} in {1}.".format(missing, where))


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise SchemaError("{0} must be a finite number, got {1!r}.".format(where, value))
    return float(value)


def _parse_box(obj, where):
    _check_fields(obj, BOX_FIELDS + OPTIONAL_BOX_FIELDS, BOX_FIELDS, where)
    box = Box(*(_number(obj[k], "{0}.{1}".format(where, k)) for k in BOX_FIELDS))
    score = obj.get('score')
    if score is not None:
        score = _number(score, where + '.score')
        if score < 0:
            raise SchemaError("{0}.score must be non-negative.".format(where))
    is_object = obj.get('is_object')
    if is_object is not None and not isinstance(is_object, bool):
        raise SchemaError("{0}.is_object must be a boolean.".format(where))
    logits = obj.get('logits')
    if logits is not None:
        if not isinstance(logits, list) or len(logits) != 2:
            raise SchemaError("{0}.logits must be a list of two numbers.".format(where))
        logits = tuple(_number(v, where + '.logits') for v in logits)
    return BoxEntry(box, score, is_object, logits)


def _parse_boxes(boxes, where):
    if not isinstance(boxes, list):
        raise SchemaError("{0} must be a list.".format(where))
    return [_parse_box(b, "{0}[{1}]".format(where, i)) for i, b in enumerate(boxes)]


def _check_version(doc, where):
    if doc['schema_version'] != SCHEMA_VERSION:
        raise SchemaError("Unsupported schema_version {0!r} in {1}.".format(doc['schema_version'], where))


def read_box_document(path):
    """Read and validate a box document.

    Returns
    -------
    document : :class:`BoxDocument`
    """
    doc = _load_json(path)
    _check_fields(doc, DOCUMENT_FIELDS, ('schema_version', 'boxes'), str(path))
    _check_version(doc, str(path))
    size = []
    for key in ('image_width', 'image_height'):
        value = doc.get(key, 1)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise SchemaError("{0} must be a positive integer, got {1!r}.".format(key, value))
        size.append(value)
    metadata = doc.get('metadata', {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise SchemaError("metadata must map strings to strings.")
    return BoxDocument(size[0], size[1], _parse_boxes(doc['boxes'], 'boxes'), metadata)


def _encode_box(b):
    if isinstance(b, BoxEntry):
        entry = b
    elif isinstance(b, ScoredBox):
        entry = BoxEntry(b.box, b.score, None, None)
    elif isinstance(b, PredBox):
        entry = BoxEntry(b.box, None, None, tuple(b.logits))
    elif isinstance(b, TargetBox):
        entry = BoxEntry(b.box, None, b.is_object, None)
    else:
        entry = BoxEntry(as_box(b), None, None, None)
    out = dict(zip(BOX_FIELDS, (_round(v) for v in clamp_box(entry.box))))
    if entry.score is not None:
        out['score'] = _round(entry.score)
    if entry.is_object is not None:
        out['is_object'] = bool(entry.is_object)
    if entry.logits is not None:
        out['logits'] = [_round(v) for v in entry.logits]
    return out


def write_box_document(path, boxes, image_width=1, image_height=1, metadata=None):
    """Write a box document; coordinates are clamped into [0, 1] and numbers rounded to 9 digits."""
    doc = {'schema_version': SCHEMA_VERSION, 'image_width': int(image_width), 'image_height': int(image_height),
           'boxes': [_encode_box(b) for b in boxes], 'metadata': {str(k): str(v) for k, v in (metadata or {}).items()}}
    _dump_json(path, doc)


def read_eval_document(path):
    """Read an evaluation document ``{"schema_version": 1, "samples": [{"id": .., "boxes": [..]}]}``.

    Returns
    -------
    samples : dict
        Sample id to list of :class:`BoxEntry`, in document order.
    """
    doc = _load_json(path)
    _check_fields(doc, EVAL_FIELDS, EVAL_FIELDS, str(path))
    _check_version(doc, str(path))
    if not isinstance(doc['samples'], list):
        raise SchemaError("samples must be a list.")
    samples = {}
    for i, sample in enumerate(doc['samples']):
        where = "samples[{0}]".format(i)
        _check_fields(sample, SAMPLE_FIELDS, SAMPLE_FIELDS, where)
        if not isinstance(sample['id'], str):
            raise SchemaError("{0}.id must be a string.".format(where))
        if sample['id'] in samples:
            raise SchemaError("Duplicate sample id {0!r}.".format(sample['id']))
        samples[sample['id']] = _parse_boxes(sample['boxes'], where + '.boxes')
    return samples


def write_eval_document(path, samples):
    """Write an evaluation document from a mapping of sample id to boxes."""
    doc = {'schema_version': SCHEMA_VERSION,
           'samples': [{'id': str(k), 'boxes': [_encode_box(b) for b in v]} for k, v in samples.items()]}
    _dump_json(path, doc)


def write_json(path, doc):
    """Write any JSON-serializable object deterministically (sorted keys, trailing newline)."""
    _dump_json(path, doc)


def _parse_tuples(text, width, key):
    rows = []
    for chunk in text.split(';'):
        if not chunk.strip():
            continue
        try:
            values = [float(v) for v in chunk.split(',')]
        except ValueError:
            raise SchemaError("{0} entries must be comma-separated numbers, got {1!r}.".format(key, chunk))
        if len(values) != width:
            raise SchemaError("{0} entries need {1} values, got {2!r}.".format(key, width, chunk))
        rows.append(values)
    if not rows:
        raise SchemaError("{0} must not be empty.".format(key))
    return np.array(rows)


def read_refine_config(path):
    """Read the flat ``key = value`` configuration of the refinement demo.

    Blob lists are ``;``-separated ``mx, my, sx, sy, amplitude`` tuples; the teacher is a
    ``;``-separated list of ``cx, cy, w, h`` boxes. Either ``teacher`` or ``target_blobs`` is required
    next to ``blobs``. ``seed`` defaults to ``BBR_SEED`` (else 0).

    Returns
    -------
    config : :class:`RefineConfig`
    """
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, 'r', encoding='utf-8') as f:
        try:
            parser.read_string('[{0}]\n'.format(CONFIG_SECTION) + f.read(), source=str(path))
        except configparser.Error as exc:
            raise SchemaError("Invalid configuration {0}: {1}".format(path, exc))
    raw = dict(parser[CONFIG_SECTION])
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise SchemaError("Unknown configuration key(s) {0}.".format(unknown))
    values = dict(CONFIG_DEFAULTS)
    try:
        for key in ('width', 'height', 'n_train', 'phase1_iters', 'phase2_iters'):
            values[key] = int(raw.get(key, values[key]))
        for key in ('phase1_lr', 'phase2_lr', 'reg_weight', 'union_prob'):
            values[key] = float(raw.get(key, values[key]))
        values['seed'] = int(raw['seed'], 0) if 'seed' in raw else default_seed()
    except ValueError as exc:
        raise SchemaError("Invalid configuration value: {0}".format(exc))
    if 'blobs' not in raw:
        raise SchemaError("The configuration needs 'blobs'.")
    blobs = _parse_tuples(raw['blobs'], len(BLOB_FIELDS), 'blobs')
    target_blobs = _parse_tuples(raw['target_blobs'], len(BLOB_FIELDS), 'target_blobs') if 'target_blobs' in raw \
        else None
    teacher = None
    if 'teacher' in raw:
        teacher = [ScoredBox(Box(*row), 1.0) for row in _parse_tuples(raw['teacher'], 4, 'teacher')]
    if teacher is None and target_blobs is None:
        raise SchemaError("The configuration needs 'teacher' or 'target_blobs'.")
    try:
        schedule = Schedule(values['phase1_iters'], values['phase2_iters'], values['phase1_lr'], values['phase2_lr'],
                            values['seed'])
    except ValueError as exc:
        raise SchemaError(str(exc))
    return RefineConfig(values['width'], values['height'], blobs, target_blobs, teacher, values['n_train'],
                        schedule, values['reg_weight'], values['union_prob'])


TRACE_COLUMNS = ('iteration', 'total', 'cls', 'box', 'giou', 'reg', 'union')


def write_trace_csv(path, trace):
    """Write a phase-2 :class:`~boxrefine.refinesim.RefinementTrace` as CSV with 9-digit numbers."""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TRACE_COLUMNS)
        for it in range(len(trace.total)):
            writer.writerow([it] + [format_number(getattr(trace, c)[it]) for c in TRACE_COLUMNS[1:-1]] +
                            [int(trace.union[it])])


def prediction_path(directory, sample_id):
    """Location of a sample's heatmap inside a prediction directory."""
    return os.path.join(directory, '{0}.bbr'.format(sample_id))
