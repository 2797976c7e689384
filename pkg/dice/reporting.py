"""
JSON and CSV report files.

JSON goes through the DRF serializers and ``JSONRenderer``; CSV columns are
fixed per result type. ``report(result, out)`` writes the JSON document to
``out`` and the CSV rows next to it (same stem, ``.csv``); a similarity matrix
gets one long-format CSV per metric (``<stem>_<metric>.csv``).
"""
import csv
import logging
from pathlib import Path

from rest_framework.renderers import JSONRenderer

from .analysis import SIMILARITY_METRICS, MetricTable, SimilarityMatrix, SimilarityResult, ZScoreResult, zscores
from .exceptions import ConfigError
from .fusion import ConsensusReport
from .partition import write_jsonl
from .serializers import (
    ConsensusReportSerializer,
    OverlapMatrixSerializer,
    SimilarityMatrixSerializer,
    SimilarityResultSerializer,
    SimResultSerializer,
    ZScoreResultSerializer,
)
from .simulation import SimResult

logger = logging.getLogger(__name__)

SIM_COLUMNS = ('p', 'K', 'trials', 'filtered_err', 'avg_err', 'exact_err', 'hoeffding', 'half_width')
CONSENSUS_COLUMNS = (
    'tensor', 'elements', 'positive_majority', 'negative_majority', 'no_consensus',
    'mean_weight_entropy', 'updated_elements',
)
SIMILARITY_COLUMNS = ('tensor', 'elements', 'l2', 'cosine', 'sign_agreement', 'param_hist_kl_ab', 'param_hist_kl_ba')


def render_json(data):
    return JSONRenderer().render(data, renderer_context={'indent': 2}) + b'\n'


def write_json(path, data):
    Path(path).write_bytes(render_json(data))


def _cell(value):
    return repr(float(value)) if isinstance(value, float) else value


def write_csv(path, columns, rows):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(value) for value in row])


def _paths(out):
    out = Path(out)
    json_path = out.with_suffix('.json') if out.suffix == '.csv' else out
    return json_path, out.with_suffix('.csv')


# ============================================
# DOCUMENTS AND ROWS PER RESULT TYPE
# ============================================

def _consensus(report, json_path, csv_path):
    write_json(json_path, ConsensusReportSerializer(report).data)
    rows = [('*', report.totals)] + list(report.per_tensor.items())
    write_csv(csv_path, CONSENSUS_COLUMNS, (
        (name, s.elements, s.positive_majority, s.negative_majority, s.no_consensus,
         s.mean_weight_entropy, s.updated_elements)
        for name, s in rows
    ))
    return [json_path, csv_path]


def _simulation(results, json_path, csv_path):
    data = SimResultSerializer(results, many=True).data
    write_json(json_path, data)
    write_csv(csv_path, SIM_COLUMNS, ([row[column] for column in SIM_COLUMNS] for row in data))
    return [json_path, csv_path]


def _similarity(result, json_path, csv_path):
    write_json(json_path, SimilarityResultSerializer(result).data)
    rows = [('*', result.overall)] + list(result.per_tensor.items())
    write_csv(csv_path, SIMILARITY_COLUMNS, (
        (name, s.elements, s.l2, s.cosine, s.sign_agreement, s.param_hist_kl_ab, s.param_hist_kl_ba)
        for name, s in rows
    ))
    return [json_path, csv_path]


def _similarity_matrix(matrix, json_path, csv_path):
    write_json(json_path, SimilarityMatrixSerializer(matrix).data)
    written = [json_path]
    for metric in SIMILARITY_METRICS:
        metric_path = csv_path.with_name(f'{csv_path.stem}_{metric}.csv')
        values = matrix.values[metric]
        write_csv(metric_path, ('row', 'col', 'value'), (
            (row_label, col_label, values[i][j])
            for i, row_label in enumerate(matrix.labels)
            for j, col_label in enumerate(matrix.labels)
        ))
        written.append(metric_path)
    return written


def _zscores(result, json_path, csv_path):
    write_json(json_path, ZScoreResultSerializer(result).data)
    write_csv(csv_path, ('method', *(f'Z_{task}' for task in result.tasks), 'AvgZ'), (
        (method, *row, avgz) for method, row, avgz in zip(result.methods, result.z, result.avgz)
    ))
    return [json_path, csv_path]


def report(inputs, out):
    """
    Write ``inputs`` as JSON to ``out`` plus CSV beside it.

    Accepts a ConsensusReport, a SimResult or list of them, a SimilarityResult,
    a SimilarityMatrix, a ZScoreResult or a MetricTable (scored first).

    :return: list of written paths
    """
    json_path, csv_path = _paths(out)
    json_path.parent.mkdir(parents=True, exist_ok=True)

    if isinstance(inputs, MetricTable):
        inputs = zscores(inputs)
    if isinstance(inputs, SimResult):
        inputs = [inputs]

    if isinstance(inputs, ConsensusReport):
        written = _consensus(inputs, json_path, csv_path)
    elif isinstance(inputs, list) and all(isinstance(item, SimResult) for item in inputs):
        written = _simulation(inputs, json_path, csv_path)
    elif isinstance(inputs, SimilarityResult):
        written = _similarity(inputs, json_path, csv_path)
    elif isinstance(inputs, SimilarityMatrix):
        written = _similarity_matrix(inputs, json_path, csv_path)
    elif isinstance(inputs, ZScoreResult):
        written = _zscores(inputs, json_path, csv_path)
    else:
        raise ConfigError(f"cannot write a report for {type(inputs).__name__}")

    logger.info(f"Wrote report {', '.join(str(path) for path in written)}")
    return written


def write_partition(outdir, splits, matrix):
    """``subset_<m>_train.jsonl``, ``subset_<m>_test.jsonl``, ``overlap.json`` and ``overlap.csv``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for m, (train, test) in enumerate(splits):
        for role, records in (('train', train), ('test', test)):
            path = outdir / f'subset_{m}_{role}.jsonl'
            write_jsonl(path, records)
            written.append(path)

    document = dict(OverlapMatrixSerializer(matrix).data)
    document['sizes'] = [{'train': len(train), 'test': len(test)} for train, test in splits]
    write_json(outdir / 'overlap.json', document)
    write_csv(outdir / 'overlap.csv', ('train_subset', 'test_subset', 'count', 'percent'), (
        (m, n, count, matrix.percent[m][n])
        for m, row in enumerate(matrix.counts)
        for n, count in enumerate(row)
    ))
    written += [outdir / 'overlap.json', outdir / 'overlap.csv']
    logger.info(f"Wrote {len(splits)} subsets and the overlap matrix to {outdir}")
    return written
