"""Profile a command by sampling its resource consumption.

The profiler spawns the target command and attaches one watcher per
resource kind. Each watcher runs in its own thread and follows the
plugin lifecycle:

    _pre_process(config)   set up counters after the target is spawned
    _sample(index)         invoked once per sampling period
    _post_process()        tear down counters after the target exited
    _finalize(raw, wrap)   post-process with the raw results of all
                           watchers and the reaped process accounting

Watchers are not synchronized with each other, so the timestamps of the
different series can drift apart; series are merged by sample index.
"""

import enum
import logging
import sys
import threading
import six
from pyworkload import config as config_
from pyworkload import model
from pyworkload import store
from pyworkload import telemetry
from pyworkload import util
from pyworkload.model import ResourceKind


class Error(Exception):
    """Base exception class for this module."""


class CommandError(Error):
    """The target command could not be spawned."""

    def __init__(self, command=None, reason=None):
        Error.__init__(self, 'Unable to run %r: %s' % (command, reason))
        self.command = command
        self.reason = reason


class LifecycleError(Error):
    """A watcher was driven through its lifecycle out of order."""


class WatcherState(enum.IntEnum):
    """The lifecycle states of a watcher, in order."""
    CREATED = 0
    PRE_PROCESSED = 1
    SAMPLING = 2
    POST_PROCESSED = 3
    FINALIZED = 4


class WatcherMeta(type):
    """A metaclass registering watcher plugins by resource kind."""

    registry = {}

    def __new__(mcs, name, bases, new_attrs):
        klass = type.__new__(mcs, name, bases, new_attrs)
        kind = new_attrs.get('kind')
        if kind is not None:
            mcs.registry[ResourceKind.parse(kind)] = klass
        return klass

    def for_kind(cls, kind):
        """Return the watcher class for a resource kind."""
        try:
            return WatcherMeta.registry[ResourceKind.parse(kind)]
        except KeyError:
            raise Error('No watcher for %s' % (kind,))


class Watcher(six.with_metaclass(WatcherMeta, object)):
    """Base class of the watcher plugins.

    A watcher samples one resource kind of one target at a fixed rate.
    The loop keeps running until it is told to stop, and then takes one
    more sample at the next period boundary, so profiling always ends
    on a full sampling period.
    """

    kind = None
    # The system watcher contributes static facts only.
    sampled = True

    def __init__(self, backend, target, sample_rate_hz, stop=None,
                 abort=None):
        """Initialize a new Watcher.

        Args:
            backend: The telemetry backend to read counters from.
            target: The ProbeTarget to watch.
            sample_rate_hz: Samples per second.
            stop: An Event set once the target has exited.
            abort: An Event set to end sampling immediately.
        """
        self.log = logging.getLogger('pyworkload.sampler')
        self.backend = backend
        self.target = target
        self.period_s = 1.0 / sample_rate_hz
        self._terminate = stop or threading.Event()
        self._abort = abort or threading.Event()
        self.state = WatcherState.CREATED
        self.samples = []
        self.gaps = 0
        self.error = None
        self._previous = None
        self._vanished = False
        self._thread = None

    def _advance(self, state):
        if state != self.state + 1:
            raise LifecycleError('%s cannot move from %s to %s' % (
                type(self).__name__, self.state.name, state.name))
        self.state = state

    def start(self):
        """Run the watcher in its own thread."""
        name = 'watcher-%s-%d' % (self.kind.value, self.target.pid)
        self._thread = threading.Thread(target=self._guarded_run, name=name)
        self._thread.daemon = True
        self._thread.start()

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)

    def _guarded_run(self):
        try:
            self.run()
        except Exception as err:
            self.log.exception('%s watcher failed', self.kind.value)
            self.error = err

    def run(self):
        """The sampling loop of the watcher."""
        self._pre_process(None)
        self._advance(WatcherState.SAMPLING)
        start = self.backend.clock()
        index = 0
        while True:
            due = start + index * self.period_s
            remaining = due - self.backend.clock()
            if remaining > 0 and self._abort.wait(remaining):
                break
            final = self._terminate.is_set() or self._vanished
            if self.sampled:
                final = self._sample(index, final) or final
            elif final:
                break
            index += 1
            if final:
                break
        self._post_process()

    def _pre_process(self, config):
        try:
            self.backend.attach(self.target, self.kind)
        except telemetry.TargetVanished:
            self.log.info('%s watcher attached after target exit',
                          self.kind.value)
            self._vanished = True
        self._advance(WatcherState.PRE_PROCESSED)

    def _sample(self, index, final=False):
        """Take one sample.

        Args:
            index: The index of the sampling period.
            final: Whether this is the last sample of the run.
        Returns:
            True if the target vanished and sampling must end.
        """
        try:
            if final and self._vanished:
                snap = self.backend.final_snapshot(self.target, self.kind)
            else:
                snap = self.backend.snapshot(self.target, self.kind)
        except telemetry.TargetVanished:
            self._vanished = True
            try:
                snap = self.backend.final_snapshot(self.target, self.kind)
            except telemetry.Error as err:
                self._gap(index, err)
                return True
            self._emit(index, snap)
            return True
        except telemetry.BackendUnavailable as err:
            self._gap(index, err)
            return False
        self._emit(index, snap)
        return False

    def _timestamp(self, taken_at_s):
        t = taken_at_s - self.target.spawn_timestamp_s
        if self.samples and t <= self.samples[-1].timestamp_s:
            t = self.samples[-1].timestamp_s + 1e-6
        return t

    def _emit(self, index, snap):
        payload = telemetry.delta(self._previous, snap)
        self._previous = snap
        sample = model.Sample(index, self._timestamp(snap.taken_at_s),
                              self.kind, payload)
        self.log.debug('%s sample %d at %.3fs: %s', self.kind.value, index,
                       sample.timestamp_s, payload)
        self.samples.append(sample)

    def _gap(self, index, err):
        self.gaps += 1
        self.log.warning('%s sample %d is a gap: %s', self.kind.value, index,
                         err)
        levels = {}
        if self.samples:
            last = self.samples[-1].payload
            levels = dict((name, getattr(last, name))
                          for name in model.MAX_METRICS[self.kind])
        self.samples.append(model.Sample(
            index, self._timestamp(self.backend.clock()), self.kind,
            model.PAYLOAD_TYPES[self.kind](**levels), gap=True))

    def _post_process(self):
        self.backend.detach(self.target, self.kind)
        self._advance(WatcherState.POST_PROCESSED)

    def _finalize(self, raw, wrap_accounting, run):
        """Return this watcher's series, corrected with other results.

        Args:
            raw: A dict mapping ResourceKind to the raw Sample lists of
                all watchers.
            wrap_accounting: A WrapAccounting of the reaped target, or None.
            run: The RunRecord of the profiling run.
        Returns:
            The final Sample list of this watcher.
        """
        self._advance(WatcherState.FINALIZED)
        return list(raw.get(self.kind, ()))


class CpuWatcher(Watcher):
    """Watches instructions, cycles, CPU time and threads."""

    kind = ResourceKind.COMPUTE

    estimated = False

    def _post_process(self):
        self.estimated = self.backend.counters_estimated(self.target)
        Watcher._post_process(self)

    def _finalize(self, raw, wrap_accounting, run):
        samples = Watcher._finalize(self, raw, wrap_accounting, run)
        return correct_cpu_time(samples, wrap_accounting, run.system,
                                run.estimated)


class MemoryWatcher(Watcher):
    """Watches peak and resident memory, and allocation deltas."""

    kind = ResourceKind.MEMORY

    def _finalize(self, raw, wrap_accounting, run):
        samples = Watcher._finalize(self, raw, wrap_accounting, run)
        return correct_peak_memory(samples, wrap_accounting)


class StorageWatcher(Watcher):
    """Watches bytes read and written."""

    kind = ResourceKind.STORAGE


class SystemWatcher(Watcher):
    """Contributes the static system facts and the overall runtime."""

    kind = ResourceKind.SYSTEM
    sampled = False

    def _pre_process(self, config):
        self._advance(WatcherState.PRE_PROCESSED)

    def _post_process(self):
        self._advance(WatcherState.POST_PROCESSED)

    def _finalize(self, raw, wrap_accounting, run):
        self._advance(WatcherState.FINALIZED)
        return []


def correct_cpu_time(samples, wrap_accounting, system, estimated=False):
    """Fold CPU time missed before the watcher attached into the series.

    The reaped process accounting covers the whole run, while sampling
    starts shortly after the spawn. Any CPU time the accounting has in
    excess of the samples is added to the first sample; with estimated
    counters the matching cycles and instructions are added as well.
    """
    if not samples or wrap_accounting is None:
        return samples
    sampled = sum(s.payload.cpu_time_us for s in samples)
    missing = wrap_accounting.cpu_time_us - sampled
    if missing <= 0:
        return samples
    first = samples[0]
    payload = first.payload._replace(
        cpu_time_us=first.payload.cpu_time_us + missing)
    if estimated:
        cycles = int(round(missing / 1e6 * system.max_freq_hz))
        payload = payload._replace(
            instructions=payload.instructions + cycles,
            cycles_used=payload.cycles_used + cycles)
    return [first._replace(payload=payload)] + list(samples[1:])


def correct_peak_memory(samples, wrap_accounting):
    """Raise the final peak to the reaped process' peak, if larger.

    A reaped peak of None is unknown and leaves the sampled high-water
    mark in place.
    """
    if (not samples or wrap_accounting is None or
            wrap_accounting.peak_bytes is None):
        return samples
    sampled = max(s.payload.peak_bytes for s in samples)
    if wrap_accounting.peak_bytes <= sampled:
        return samples
    last = samples[-1]
    payload = last.payload._replace(peak_bytes=wrap_accounting.peak_bytes)
    return list(samples[:-1]) + [last._replace(payload=payload)]


class RunRecord(object):
    """Facts about one profiling run, outside of the sampled series."""

    def __init__(self, command, tags, system, sample_rate_hz, created_at,
                 exit_status=0, flags=(), system_load=None, ttc_s=None,
                 estimated=False):
        self.command = command
        self.tags = frozenset(tags or ())
        self.system = system
        self.sample_rate_hz = sample_rate_hz
        self.created_at = created_at
        self.exit_status = exit_status
        self.flags = set(flags)
        self.system_load = system_load
        self.ttc_s = ttc_s
        self.estimated = estimated


def finalize(raw, wrap_accounting, run, watchers=None):
    """Assemble a Profile from the raw watcher results.

    Args:
        raw: A dict mapping ResourceKind to raw Sample lists.
        wrap_accounting: A WrapAccounting of the reaped target, or None.
        run: The RunRecord of the profiling run.
        watchers: The post-processed watchers; stand-ins are created for
            kinds in raw without one.
    Returns:
        A Profile whose totals are integrated from the corrected series.
    """
    watchers = dict((w.kind, w) for w in (watchers or ()))
    for watcher in watchers.values():
        if watcher.state != WatcherState.POST_PROCESSED:
            raise LifecycleError('%s watcher is %s, not post-processed' %
                                 (watcher.kind.value, watcher.state.name))
    for kind in raw:
        if kind not in watchers:
            watcher = Watcher.for_kind(kind)(None, None, run.sample_rate_hz)
            watcher.state = WatcherState.POST_PROCESSED
            watchers[kind] = watcher
    series = {}
    for kind, watcher in six.iteritems(watchers):
        samples = watcher._finalize(raw, wrap_accounting, run)
        if watcher.sampled:
            series[kind] = samples

    flags = set(run.flags)
    if run.estimated and ResourceKind.COMPUTE in series:
        flags.add(model.Profile.FLAG_ESTIMATED_CPU)
    if any(s.gap for samples in series.values() for s in samples):
        flags.add(model.Profile.FLAG_GAPS)
    if run.exit_status:
        flags.add(model.Profile.FLAG_TARGET_FAILED)

    ttc_s = run.ttc_s or 0.0
    last = [samples[-1].timestamp_s for samples in series.values() if samples]
    runtime_s = max(last + [ttc_s])
    first = [samples[0].timestamp_s for samples in series.values() if samples]
    spawn_offset_s = min(first) if first else 0.0
    return model.Profile(
        command=run.command,
        tags=run.tags,
        system=run.system,
        series=series,
        totals=model.integrate_totals(series, runtime_s),
        sample_rate_hz=run.sample_rate_hz,
        spawn_offset_s=spawn_offset_s,
        created_at=run.created_at,
        exit_status=run.exit_status,
        flags=flags,
        system_load=run.system_load,
        ttc_s=ttc_s)


def watcher_loop(backend, kind, target, sample_rate_hz, stop=None):
    """Sample one resource kind of a target in the calling thread.

    Sampling ends at the first period boundary after stop is set, or
    when the target vanishes.

    Returns:
        The list of Samples taken.
    """
    watcher = Watcher.for_kind(kind)(backend, target, sample_rate_hz, stop)
    watcher.run()
    return watcher.samples


def callable_command(func):
    """Return the key and argument list to run a Python callable.

    The callable runs in a fresh interpreter, so it must be importable
    by its module and qualified name.
    """
    module = func.__module__
    name = getattr(func, '__qualname__', func.__name__)
    if module == '__main__' or '<' in name:
        raise CommandError(func, 'only importable module level callables '
                                 'can be profiled')
    code = ('import importlib, functools; '
            'm = importlib.import_module(%r); '
            'f = functools.reduce(getattr, %r.split("."), m); f()' %
            (module, name))
    return 'python:%s.%s' % (module, name), [sys.executable, '-c', code]


class Profiler(object):
    """Profiles commands with a telemetry backend."""

    def __init__(self, backend=None, config=None):
        """Initialize a new Profiler.

        Args:
            backend: The telemetry backend (default: the OS backend).
            config: The default ProfilerConfig.
        """
        self.log = logging.getLogger('pyworkload.sampler')
        self.backend = backend or telemetry.default_backend()
        self.config = config or config_.ProfilerConfig()

    def profile(self, command, tags=None, config=None):
        """Profile one run of a command.

        Args:
            command: A shell command string, an argument list, or an
                importable Python callable.
            tags: Tags of the profile (in addition to the config's).
            config: A ProfilerConfig overriding the default one.
        Returns:
            The Profile of the run. Runs with a nonzero exit status are
            returned too, flagged as failed.
        Raises:
            CommandError: if the command cannot be spawned.
        """
        config = config or self.config
        tags = frozenset(tags or ()) | config.tags
        if callable(command):
            key, args = callable_command(command)
        else:
            key, args = util.command_line(command), util.command_args(command)
        if not args:
            raise CommandError(command, 'empty command')

        system = self.backend.read_system_info()
        load = self.backend.system_load()
        created_at = util.utcnow()
        try:
            process = self.backend.spawn(args)
        except OSError as err:
            raise CommandError(key, err.strerror or str(err))
        target = process.target
        self.log.info('profiling %r as %d at %g Hz', key, target.pid,
                      config.sample_rate_hz)

        stop = threading.Event()
        abort = threading.Event()
        watchers = [Watcher.for_kind(kind)(self.backend, target,
                                           config.sample_rate_hz, stop, abort)
                    for kind in sorted(config.watchers_enabled,
                                       key=lambda k: k.value)]
        for watcher in watchers:
            watcher.start()
        try:
            exit_status = process.wait()
        except BaseException:
            abort.set()
            process.kill()
            raise
        finally:
            stop.set()
            for watcher in watchers:
                watcher.join()
        for watcher in watchers:
            if watcher.error is not None:
                raise watcher.error

        exited_at = getattr(process, 'exited_at_s', None)
        if exited_at is None:
            exited_at = self.backend.clock()
        ttc_s = exited_at - target.spawn_timestamp_s
        if exit_status:
            self.log.warning('%r exited with status %d; the profile is '
                             'flagged', key, exit_status)
        run = RunRecord(key, tags, system, config.sample_rate_hz, created_at,
                        exit_status=exit_status, system_load=load,
                        ttc_s=ttc_s,
                        estimated=any(getattr(w, 'estimated', False)
                                      for w in watchers))
        raw = dict((w.kind, list(w.samples)) for w in watchers if w.sampled)
        profile = finalize(raw, process.accounting, run, watchers)
        self.log.info('profiled %r: %d samples, runtime %.3fs',
                      key, profile.sample_count(), profile.runtime_s)
        return profile

    def profile_to(self, destination, command, tags=None, config=None):
        """Profile one run of a command and save the profile.

        Failed runs are saved too, flagged as failed.

        Args:
            destination: A Store or a locator.
            command: The command to profile, as for profile().
            tags: Tags of the profile.
            config: A ProfilerConfig overriding the default one.
        Returns:
            A (stored id, Profile) pair.
        """
        profile = self.profile(command, tags, config)
        return store.save(profile, destination), profile


def profile(command, tags=None, config=None, backend=None,
            destination=None):
    """Profile one run of a command with a default Profiler.

    With a destination (a Store or a locator) the profile is saved there.
    """
    profiler = Profiler(backend=backend, config=config)
    if destination is None:
        return profiler.profile(command, tags)
    return profiler.profile_to(destination, command, tags)[1]
