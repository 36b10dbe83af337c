"""Profile data types, the metric catalog and derived metric formulas.

All types in this module are immutable values. A profile is a set of
per-watcher time series of resource consumption deltas, plus the totals
integrated over the runtime of the profiled process.
"""

import collections
import enum
import numpy
import six


class Error(Exception):
    """Base exception class for this module."""


class InvalidArgument(Error, ValueError):
    """An argument is outside the domain of a model operation."""


class IncompatibleProfiles(Error):
    """Profiles of different commands or tags were combined."""

    def __init__(self, msg=None, keys=None):
        Error.__init__(self, msg)
        self.keys = keys or []


class ResourceKind(enum.Enum):
    """The kinds of resources watched by the profiler.

    Network consumption is not profiled, so there is no member for it.
    """
    SYSTEM = 'system'
    COMPUTE = 'compute'
    STORAGE = 'storage'
    MEMORY = 'memory'

    @classmethod
    def parse(cls, value):
        """Return the kind for a kind or its (case insensitive) name."""
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidArgument('Unknown resource kind %r' % (value,))


# Kinds which produce sample series. The system watcher contributes static
# facts and the runtime only.
SAMPLED_KINDS = (ResourceKind.COMPUTE, ResourceKind.MEMORY,
                 ResourceKind.STORAGE)


def _check_counts(type_name, values):
    for name, value in six.iteritems(values):
        if not isinstance(value, six.integer_types):
            raise InvalidArgument('%s.%s must be an integer, got %r' %
                                  (type_name, name, value))
        if value < 0:
            raise InvalidArgument('%s.%s must be >= 0, got %d' %
                                  (type_name, name, value))


class SystemInfo(collections.namedtuple(
        'SystemInfo', 'core_count max_freq_hz total_memory_bytes '
                      'os_descriptor cpu_model')):
    """Static facts about the machine a profile was taken on."""
    __slots__ = ()

    def __new__(cls, core_count, max_freq_hz, total_memory_bytes,
                os_descriptor='', cpu_model=''):
        if core_count < 1:
            raise InvalidArgument('core_count must be >= 1, got %r' %
                                  core_count)
        if max_freq_hz <= 0:
            raise InvalidArgument('max_freq_hz must be > 0, got %r' %
                                  max_freq_hz)
        if total_memory_bytes <= 0:
            raise InvalidArgument('total_memory_bytes must be > 0, got %r' %
                                  total_memory_bytes)
        return super(SystemInfo, cls).__new__(
            cls, int(core_count), float(max_freq_hz), int(total_memory_bytes),
            os_descriptor or '', cpu_model or '')


class CpuSample(collections.namedtuple(
        'CpuSample', 'instructions cycles_used cycles_stalled_frontend '
                     'cycles_stalled_backend cpu_time_us threads')):
    """Compute consumption during one sampling period.

    All counters are per-period deltas, except threads which is the
    number of threads observed at the end of the period.
    """
    __slots__ = ()

    def __new__(cls, instructions=0, cycles_used=0, cycles_stalled_frontend=0,
                cycles_stalled_backend=0, cpu_time_us=0, threads=0):
        self = super(CpuSample, cls).__new__(
            cls, instructions, cycles_used, cycles_stalled_frontend,
            cycles_stalled_backend, cpu_time_us, threads)
        _check_counts('CpuSample', self._asdict())
        return self

    @property
    def cycles_wasted(self):
        return self.cycles_stalled_frontend + self.cycles_stalled_backend


class MemSample(collections.namedtuple(
        'MemSample', 'peak_bytes resident_bytes allocated_bytes freed_bytes')):
    """Memory consumption during one sampling period.

    peak_bytes and resident_bytes are levels at the end of the period;
    allocated_bytes and freed_bytes are per-period deltas.
    """
    __slots__ = ()

    def __new__(cls, peak_bytes=0, resident_bytes=0, allocated_bytes=0,
                freed_bytes=0):
        self = super(MemSample, cls).__new__(
            cls, peak_bytes, resident_bytes, allocated_bytes, freed_bytes)
        _check_counts('MemSample', self._asdict())
        return self


class IoSample(collections.namedtuple('IoSample',
                                      'bytes_read bytes_written')):
    """Storage consumption during one sampling period."""
    __slots__ = ()

    def __new__(cls, bytes_read=0, bytes_written=0):
        self = super(IoSample, cls).__new__(cls, bytes_read, bytes_written)
        _check_counts('IoSample', self._asdict())
        return self


PAYLOAD_TYPES = {
    ResourceKind.COMPUTE: CpuSample,
    ResourceKind.MEMORY: MemSample,
    ResourceKind.STORAGE: IoSample,
}


class Sample(collections.namedtuple(
        'Sample', 'index timestamp_s kind payload gap')):
    """One sampling period of one resource kind.

    A gap sample marks a period whose counters could not be read. Its
    deltas are zero and its levels repeat the previous sample; the
    consumption shows up in the next sample.
    """
    __slots__ = ()

    def __new__(cls, index, timestamp_s, kind, payload=None, gap=False):
        kind = ResourceKind.parse(kind)
        if kind not in PAYLOAD_TYPES:
            raise InvalidArgument('No samples exist for kind %s' % kind.value)
        if index < 0:
            raise InvalidArgument('Sample index must be >= 0, got %r' % index)
        if payload is None:
            payload = PAYLOAD_TYPES[kind]()
        if not isinstance(payload, PAYLOAD_TYPES[kind]):
            raise InvalidArgument('%s sample carries a %s payload' %
                                  (kind.value, type(payload).__name__))
        return super(Sample, cls).__new__(cls, int(index), float(timestamp_s),
                                          kind, payload, bool(gap))


class DerivedCpuMetrics(collections.namedtuple(
        'DerivedCpuMetrics', 'efficiency utilization flops flops_per_s')):
    """Compute metrics derived from the primary counters."""
    __slots__ = ()


# Metrics integrated by summation and by maximum.
DELTA_METRICS = collections.OrderedDict([
    (ResourceKind.COMPUTE, ('instructions', 'cycles_used',
                            'cycles_stalled_frontend',
                            'cycles_stalled_backend', 'cpu_time_us')),
    (ResourceKind.STORAGE, ('bytes_read', 'bytes_written')),
    (ResourceKind.MEMORY, ('allocated_bytes', 'freed_bytes')),
])
MAX_METRICS = collections.OrderedDict([
    (ResourceKind.COMPUTE, ('threads',)),
    (ResourceKind.STORAGE, ()),
    (ResourceKind.MEMORY, ('peak_bytes', 'resident_bytes')),
])

TOTAL_METRICS = tuple(
    name for kind in SAMPLED_KINDS
    for name in DELTA_METRICS[kind] + MAX_METRICS[kind])

# Metrics fed to emulation atoms.
EMULATED_METRICS = ('instructions', 'bytes_read', 'bytes_written',
                    'allocated_bytes', 'freed_bytes')


class Totals(collections.namedtuple('Totals',
                                    ('runtime_s',) + TOTAL_METRICS)):
    """Totals integrated over the runtime of a profiled process."""
    __slots__ = ()

    def __new__(cls, runtime_s=0.0, **metrics):
        unknown = set(metrics) - set(TOTAL_METRICS)
        if unknown:
            raise InvalidArgument('Unknown total metrics: %s' %
                                  ', '.join(sorted(unknown)))
        values = [metrics.get(name, 0) for name in TOTAL_METRICS]
        _check_counts('Totals', dict(zip(TOTAL_METRICS, values)))
        return super(Totals, cls).__new__(cls, float(runtime_s), *values)

    def metrics(self):
        """Return all totals, runtime included, as an ordered dict."""
        return self._asdict()


class ProfileStats(object):
    """Mean and population standard deviation of profile totals."""

    def __init__(self, n, mean, stddev, command=None, tags=None):
        if n < 1:
            raise InvalidArgument('Statistics need at least one profile')
        self.n = n
        self.mean = collections.OrderedDict(mean)
        self.stddev = collections.OrderedDict(stddev)
        self.command = command
        self.tags = frozenset(tags or ())

    def metric(self, name):
        """Return the (mean, stddev) pair for a metric."""
        return self.mean[name], self.stddev[name]

    def coefficient_of_variation(self, name):
        """Return stddev / mean for a metric, 0.0 for a zero mean."""
        mean, stddev = self.metric(name)
        if mean == 0:
            return 0.0
        return stddev / mean

    def __eq__(self, other):
        if isinstance(other, ProfileStats):
            return ((self.n, self.mean, self.stddev) ==
                    (other.n, other.mean, other.stddev))
        return False

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'ProfileStats(n=%d, mean=%r, stddev=%r)' % (
            self.n, dict(self.mean), dict(self.stddev))


class Profile(object):
    """A profile of one run of a command.

    Profiles are keyed by their command and tags. The series of the
    different watchers are timestamped independently and may drift
    relative to each other; they are merged by sample index.
    """

    FLAG_ESTIMATED_CPU = 'cpu-counters-estimated'
    FLAG_TARGET_FAILED = 'target-failed'
    FLAG_GAPS = 'gaps'

    def __init__(self, command, tags, system, series, totals,
                 sample_rate_hz, spawn_offset_s, created_at,
                 exit_status=0, flags=(), system_load=None, ttc_s=None):
        """Initialize a new Profile.

        Args:
            command: The exact command line which was profiled.
            tags: An iterable of user supplied tags.
            system: A SystemInfo for the profiling host.
            series: A dict mapping ResourceKind to ordered Sample lists.
            totals: The Totals integrated over the series.
            sample_rate_hz: The sampling rate used by all watchers.
            spawn_offset_s: Delay between spawning and the first sample.
            created_at: A timezone aware datetime of the profile run.
            exit_status: The exit status of the profiled command.
            flags: Markers for degraded or failed runs.
            system_load: 1-minute load average when the run started.
            ttc_s: Wall time of the profiled process from spawn to exit.
        """
        if sample_rate_hz <= 0:
            raise InvalidArgument('sample_rate_hz must be > 0, got %r' %
                                  sample_rate_hz)
        self.command = command
        self.tags = frozenset(tags or ())
        self.system = system
        self.series = dict((ResourceKind.parse(kind), tuple(samples))
                           for kind, samples in six.iteritems(series))
        self.totals = totals
        self.sample_rate_hz = float(sample_rate_hz)
        self.spawn_offset_s = float(spawn_offset_s)
        self.created_at = created_at
        self.exit_status = exit_status
        self.flags = tuple(sorted(set(flags)))
        self.system_load = system_load
        self.ttc_s = ttc_s if ttc_s is not None else totals.runtime_s

    @property
    def runtime_s(self):
        return self.totals.runtime_s

    @property
    def failed(self):
        return self.FLAG_TARGET_FAILED in self.flags

    def samples(self, kind):
        """Return the sample series for a kind (empty if not watched)."""
        return self.series.get(ResourceKind.parse(kind), ())

    def sample_count(self):
        """Return the total number of samples over all series."""
        return sum(len(samples) for samples in self.series.values())

    def merged_indices(self):
        """Return the sorted union of sample indices over all series."""
        indices = set()
        for samples in self.series.values():
            indices.update(sample.index for sample in samples)
        return sorted(indices)

    def derived(self, fp_fraction=1.0):
        """Return the run-level derived compute metrics."""
        cpu = CpuSample(**dict((name, getattr(self.totals, name))
                               for name in CpuSample._fields))
        return derive_metrics(cpu, self.runtime_s, self.system, fp_fraction)

    def check(self):
        """Verify the profile invariants.

        Raises:
            InvalidArgument: if a series is out of order or the totals
                do not match the series.
        """
        for kind, samples in six.iteritems(self.series):
            check_series(samples, kind)
        recomputed = integrate_totals(self.series, self.runtime_s)
        if recomputed != self.totals:
            raise InvalidArgument('Totals do not match the series of %r' %
                                  self.command)

    def __eq__(self, other):
        if isinstance(other, Profile):
            return self.__dict__ == other.__dict__
        return False

    def __ne__(self, other):
        return not self == other

    def __hash__(self):
        return hash((self.command, self.tags, self.created_at))

    def __repr__(self):
        return 'Profile(%r, tags=%s, samples=%d, runtime=%.3fs)' % (
            self.command, sorted(self.tags), self.sample_count(),
            self.runtime_s)


def check_series(samples, kind=None):
    """Check that a series is strictly increasing in index and time.

    The peak of a memory series never decreases.

    Raises:
        InvalidArgument: on the first out of order sample.
    """
    previous = None
    for sample in samples:
        if kind is not None and sample.kind != ResourceKind.parse(kind):
            raise InvalidArgument('%s sample in the %s series' %
                                  (sample.kind.value,
                                   ResourceKind.parse(kind).value))
        if previous is not None:
            if sample.index <= previous.index:
                raise InvalidArgument('Sample index %d follows %d' %
                                      (sample.index, previous.index))
            if sample.timestamp_s <= previous.timestamp_s:
                raise InvalidArgument('Sample time %.6f follows %.6f' %
                                      (sample.timestamp_s,
                                       previous.timestamp_s))
            if (sample.kind == previous.kind == ResourceKind.MEMORY and
                    sample.payload.peak_bytes < previous.payload.peak_bytes):
                raise InvalidArgument('Peak memory %d of sample %d is below '
                                      '%d' % (sample.payload.peak_bytes,
                                              sample.index,
                                              previous.payload.peak_bytes))
        previous = sample


def derive_cpu_efficiency(used, stalled_fe, stalled_be):
    """Return cycles_used / (cycles_used + cycles_wasted).

    An idle period (all inputs zero) has an efficiency of 0.0.
    """
    spent = used + stalled_fe + stalled_be
    if spent == 0:
        return 0.0
    return float(used) / spent


def derive_cpu_utilization(used, elapsed_s, system):
    """Return cycles_used / cycles_max for an elapsed interval.

    cycles_max is the nominal maximum of all cores over the interval. The
    result is not clamped, since clock boosting can exceed the nominal
    frequency.

    Raises:
        InvalidArgument: if elapsed_s is not positive.
    """
    if elapsed_s <= 0:
        raise InvalidArgument('elapsed_s must be > 0, got %r' % elapsed_s)
    cycles_max = system.max_freq_hz * elapsed_s * system.core_count
    return used / cycles_max


def derive_flops(cpu, fp_fraction=1.0):
    """Return the floating point operations attributed to a CPU sample.

    The counters do not separate floating point instructions, so a
    configurable fraction of all instructions is counted.

    Raises:
        InvalidArgument: if fp_fraction is outside [0, 1].
    """
    if not 0.0 <= fp_fraction <= 1.0:
        raise InvalidArgument('fp_fraction must be within [0, 1], got %r' %
                              fp_fraction)
    return int(round(cpu.instructions * fp_fraction))


def derive_metrics(cpu, elapsed_s, system, fp_fraction=1.0):
    """Return the DerivedCpuMetrics of a CPU sample or of CPU totals."""
    flops = derive_flops(cpu, fp_fraction)
    if elapsed_s > 0:
        utilization = derive_cpu_utilization(cpu.cycles_used, elapsed_s,
                                             system)
        flops_per_s = flops / float(elapsed_s)
    else:
        utilization = 0.0
        flops_per_s = 0.0
    return DerivedCpuMetrics(
        efficiency=derive_cpu_efficiency(cpu.cycles_used,
                                         cpu.cycles_stalled_frontend,
                                         cpu.cycles_stalled_backend),
        utilization=utilization,
        flops=flops,
        flops_per_s=flops_per_s)


def derive_series(samples, system, fp_fraction=1.0):
    """Return a DerivedCpuMetrics per CPU sample of a series.

    The elapsed time of a sample is the distance to its predecessor (to
    the spawn for the first sample).
    """
    derived = []
    previous_t = 0.0
    for sample in samples:
        elapsed = sample.timestamp_s - previous_t
        derived.append(derive_metrics(sample.payload, elapsed, system,
                                      fp_fraction))
        previous_t = sample.timestamp_s
    return derived


def integrate_totals(profile_series, runtime_s):
    """Integrate sample series into totals.

    Delta metrics are summed, level metrics (peak and resident memory,
    threads) are reduced by their maximum.

    Args:
        profile_series: A dict mapping ResourceKind to Sample lists.
        runtime_s: The runtime copied into the totals.
    Returns:
        A Totals object.
    """
    metrics = dict((name, 0) for name in TOTAL_METRICS)
    for kind, samples in six.iteritems(profile_series):
        kind = ResourceKind.parse(kind)
        if kind not in DELTA_METRICS:
            continue
        for sample in samples:
            payload = sample.payload
            for name in DELTA_METRICS[kind]:
                metrics[name] += getattr(payload, name)
            for name in MAX_METRICS[kind]:
                metrics[name] = max(metrics[name], getattr(payload, name))
    return Totals(runtime_s, **metrics)


def aggregate_stats(profiles):
    """Compute mean and population standard deviation over profile totals.

    Args:
        profiles: A non-empty list of profiles of one command and tag set.
    Returns:
        A ProfileStats object.
    Raises:
        InvalidArgument: if the list is empty.
        IncompatibleProfiles: if commands or tags differ.
    """
    profiles = list(profiles)
    if not profiles:
        raise InvalidArgument('Cannot aggregate an empty profile list')
    first = profiles[0]
    keys = set((p.command, p.tags) for p in profiles)
    if len(keys) > 1:
        raise IncompatibleProfiles(
            'Cannot aggregate profiles of %d different keys' % len(keys),
            sorted((command, sorted(tags)) for command, tags in keys))

    values = numpy.array([list(p.totals) for p in profiles], dtype=float)
    mean = collections.OrderedDict(
        zip(Totals._fields, values.mean(axis=0).tolist()))
    stddev = collections.OrderedDict(
        zip(Totals._fields, values.std(axis=0).tolist()))
    return ProfileStats(len(profiles), mean, stddev, first.command,
                        first.tags)
