"""Plot ready reports over stored profiles.

Every report is a list of rows (dicts) with a fixed column order, written
as CSV and optionally rendered as an SVG chart:

    overhead     time to completion with and without profiling, per
                 configuration, and the overhead in percent
    consistency  mean, standard deviation and coefficient of variation
                 of the totals of repeated runs, per configuration
    fidelity     time to completion of the application and of its
                 emulation, and their difference in percent
    profile      the samples of one profile, merged by sample index
"""

import csv
import logging
import numpy
import six
from pyworkload import model
from pyworkload import store as store_
from pyworkload.model import ResourceKind


OVERHEAD_COLUMNS = ('configuration', 'plain_n', 'plain_ttc_s',
                    'plain_ttc_std', 'profiled_n', 'profiled_ttc_s',
                    'profiled_ttc_std', 'overhead_pct')
CONSISTENCY_METRICS = ('runtime_s', 'instructions', 'cycles_used',
                       'peak_bytes', 'resident_bytes', 'bytes_read',
                       'bytes_written')
CONSISTENCY_COLUMNS = ('configuration', 'sample_rate_hz', 'n') + tuple(
    '%s_%s' % (metric, stat) for metric in CONSISTENCY_METRICS
    for stat in ('mean', 'std', 'cv'))
FIDELITY_COLUMNS = ('configuration', 'original_n', 'original_ttc_s',
                    'original_ttc_std', 'emulated_n', 'emulated_ttc_s',
                    'emulated_ttc_std', 'difference_pct')
PROFILE_COLUMNS = (('index', 'compute_t') +
                   model.CpuSample._fields +
                   ('efficiency', 'utilization', 'flops', 'memory_t') +
                   model.MemSample._fields +
                   ('storage_t',) + model.IoSample._fields + ('gap',))


class Error(Exception):
    """Base exception class for this module."""


def label(key):
    """Return a short label of a ProfileKey for report rows."""
    if not key.tags:
        return key.command
    return '%s [%s]' % (key.command, ','.join(key.tags))


def _ttc(profiles):
    values = numpy.array(profiles.ttc(), dtype=float)
    return len(values), float(values.mean()), float(values.std())


def overhead_rows(store, configurations):
    """Compare the time to completion of plain and profiled runs.

    Args:
        store: The Store holding the runs.
        configurations: (label, plain key, profiled key) triples.
    Returns:
        One row per configuration.
    Raises:
        ProfileNotFound: if a key has no runs.
    """
    rows = []
    for name, plain_key, profiled_key in configurations:
        plain = _require(store, plain_key)
        profiled = _require(store, profiled_key)
        plain_n, plain_ttc, plain_std = _ttc(plain)
        profiled_n, profiled_ttc, profiled_std = _ttc(profiled)
        rows.append({
            'configuration': name,
            'plain_n': plain_n,
            'plain_ttc_s': plain_ttc,
            'plain_ttc_std': plain_std,
            'profiled_n': profiled_n,
            'profiled_ttc_s': profiled_ttc,
            'profiled_ttc_std': profiled_std,
            'overhead_pct': percent_difference(profiled_ttc, plain_ttc),
        })
    return rows


def consistency_rows(store, keys):
    """Summarize the totals of repeated runs, one row per key."""
    rows = []
    for key in keys:
        profiles = _require(store, key)
        stats = profiles.stats()
        row = {
            'configuration': label(key),
            'sample_rate_hz': profiles[0].sample_rate_hz,
            'n': stats.n,
        }
        for metric in CONSISTENCY_METRICS:
            mean, std = stats.metric(metric)
            row['%s_mean' % metric] = mean
            row['%s_std' % metric] = std
            row['%s_cv' % metric] = stats.coefficient_of_variation(metric)
        rows.append(row)
    return rows


def fidelity_rows(store, keys):
    """Compare applications with their recorded emulation runs."""
    rows = []
    for key in keys:
        original_n, original_ttc, original_std = _ttc(_require(store, key))
        emulated_n, emulated_ttc, emulated_std = _ttc(
            _require(store, store_.emulation_key(key)))
        rows.append({
            'configuration': label(key),
            'original_n': original_n,
            'original_ttc_s': original_ttc,
            'original_ttc_std': original_std,
            'emulated_n': emulated_n,
            'emulated_ttc_s': emulated_ttc,
            'emulated_ttc_std': emulated_std,
            'difference_pct': percent_difference(emulated_ttc, original_ttc),
        })
    return rows


def profile_rows(profile, fp_fraction=1.0):
    """Return the samples of a profile merged by index.

    Columns of kinds without a sample at an index are left empty.
    """
    by_index = dict((index, {}) for index in profile.merged_indices())
    for kind, samples in six.iteritems(profile.series):
        for sample in samples:
            by_index[sample.index][kind] = sample

    rows = []
    previous_t = 0.0
    for index in sorted(by_index):
        row = {'index': index, 'gap': False}
        for kind, sample in six.iteritems(by_index[index]):
            row['%s_t' % kind.value] = sample.timestamp_s
            row.update(sample.payload._asdict())
            row['gap'] = row['gap'] or sample.gap
        cpu = by_index[index].get(ResourceKind.COMPUTE)
        if cpu is not None:
            derived = model.derive_metrics(
                cpu.payload, cpu.timestamp_s - previous_t, profile.system,
                fp_fraction)
            row.update(efficiency=derived.efficiency,
                       utilization=derived.utilization, flops=derived.flops)
            previous_t = cpu.timestamp_s
        rows.append(row)
    return rows


def write_csv(rows, columns, stream):
    """Write rows as CSV with a header line."""
    writer = csv.DictWriter(stream, fieldnames=columns, restval='',
                            extrasaction='ignore', lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def plot_svg(rows, x, ys, path, title=None):
    """Render columns of report rows as a bar chart.

    Args:
        rows: Report rows.
        x: The column labelling the bars.
        ys: The columns to draw side by side.
        path: The SVG file to write.
        title: An optional chart title.
    Raises:
        ImportError: if matplotlib is not installed.
    """
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError:
        raise ImportError('matplotlib is not installed: '
                          'pip install pyworkload[plot]')
    log = logging.getLogger('pyworkload.report')
    positions = numpy.arange(len(rows))
    width = 0.8 / max(1, len(ys))
    fig, ax = plt.subplots(figsize=(max(6, len(rows) * 1.5), 4.5))
    for i, column in enumerate(ys):
        ax.bar(positions + i * width, [row.get(column) or 0 for row in rows],
               width, label=column)
    ax.set_xticks(positions + width * (len(ys) - 1) / 2.0)
    ax.set_xticklabels([str(row.get(x)) for row in rows], rotation=20,
                       ha='right')
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format='svg')
    plt.close(fig)
    log.info('wrote %s', path)


def _require(store, key):
    profiles = store.load(key)
    if not profiles:
        raise store_.ProfileNotFound(key)
    return profiles


def percent_difference(value, reference):
    if not reference:
        return 0.0
    return (value - reference) / reference * 100.0
