"""Replay the resource consumption of a profile.

A profile is turned into an EmulationPlan: one SampleGroup per sampling
period, holding one AtomTask per resource kind consumed in that period.
The emulator runs the groups in order. All atoms of a group start at
once, in their own worker threads, and the next group starts only when
every atom of the previous one has finished. The timing of the profile
is not replayed; only the order of consumption is.

Background load, i.e. CPU, disk and memory pressure from separate
processes, can be held while emulating to mimic a busy host.
"""

import collections
import logging
import multiprocessing
import os
import sys
import tempfile
import threading
import time
import psutil
import six
from concurrent import futures
from pyworkload import atoms
from pyworkload import config as config_
from pyworkload import model
from pyworkload import sampler
from pyworkload import store
from pyworkload import telemetry
from pyworkload import util
from pyworkload.model import ResourceKind


# Iteration counts of the two calibration runs; their difference cancels
# the start-up cost of the interpreter.
CALIBRATION_ITERATIONS = (200, 20200)
LOAD_PERIOD_S = 0.1


class Error(Exception):
    """Base exception class for this module."""


class EmptyPlan(Error):
    """There is nothing to emulate."""


class AtomFailure(Error):
    """An atom failed; emulation stopped after the failing group."""

    def __init__(self, group=None, atom=None, report=None, reason=None):
        Error.__init__(self, 'Atom %s of group %s failed: %s' % (
            getattr(atom, 'value', atom), group, reason))
        self.group = group
        self.atom = atom
        self.report = report
        self.reason = reason


class LoadError(Error):
    """A background load cannot be established."""


class SampleGroup(collections.namedtuple('SampleGroup', 'index tasks')):
    """The atom tasks of one profiled sampling period."""
    __slots__ = ()

    def __new__(cls, index, tasks=()):
        tasks = tuple(tasks)
        kinds = [task.kind for task in tasks]
        if len(set(kinds)) != len(kinds):
            raise model.InvalidArgument(
                'Group %d has several tasks of one kind' % index)
        return super(SampleGroup, cls).__new__(cls, int(index), tasks)


class EmulationPlan(object):
    """Sample groups in profiled order, without any timing."""

    def __init__(self, groups, command=None, tags=(),
                 block_bytes=util.MiB):
        """Initialize a new EmulationPlan.

        Args:
            groups: SampleGroups in strictly increasing index order.
            command: The command of the emulated profile.
            tags: The tags of the emulated profile.
            block_bytes: The block size of memory and storage tasks.
        Raises:
            InvalidArgument: if the groups are out of order.
        """
        self.groups = tuple(groups)
        for previous, group in zip(self.groups, self.groups[1:]):
            if group.index <= previous.index:
                raise model.InvalidArgument('Group %d follows group %d' %
                                            (group.index, previous.index))
        self.command = command
        self.tags = frozenset(tags or ())
        self.block_bytes = block_bytes

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def task_count(self):
        return sum(len(group.tasks) for group in self.groups)

    def totals(self):
        """Return the planned quantity of every emulated metric."""
        totals = dict((name, 0) for name in model.EMULATED_METRICS)
        for group in self.groups:
            for task in group.tasks:
                for name, value in six.iteritems(task.quantities()):
                    totals[name] += value
        return totals

    def __repr__(self):
        return 'EmulationPlan(%r, groups=%d, tasks=%d)' % (
            self.command, len(self.groups), self.task_count())


def _efficiency(cpu):
    return model.derive_cpu_efficiency(cpu.cycles_used,
                                       cpu.cycles_stalled_frontend,
                                       cpu.cycles_stalled_backend)


def plan_from_profile(profile, block_bytes=util.MiB, efficiency=None):
    """Convert a profile into an EmulationPlan.

    Args:
        profile: The Profile to emulate.
        block_bytes: The block size of memory and storage tasks.
        efficiency: An efficiency for every compute task, overriding the
            efficiencies of the profile.
    Returns:
        An EmulationPlan with one group per merged sample index.
    Raises:
        EmptyPlan: if the profile consumed nothing that can be emulated.
    """
    by_index = collections.defaultdict(dict)
    for kind, samples in six.iteritems(profile.series):
        for sample in samples:
            by_index[sample.index][kind] = sample.payload
    run_efficiency = _efficiency(profile.totals) or 1.0

    groups = []
    for index in sorted(by_index):
        payloads = by_index[index]
        tasks = []
        cpu = payloads.get(ResourceKind.COMPUTE)
        if cpu is not None and cpu.instructions:
            target = efficiency or _efficiency(cpu) or run_efficiency
            tasks.append(atoms.AtomTask.compute(cpu.instructions, target))
        mem = payloads.get(ResourceKind.MEMORY)
        if mem is not None and (mem.allocated_bytes or mem.freed_bytes):
            tasks.append(atoms.AtomTask.memory(
                mem.allocated_bytes, mem.freed_bytes, block_bytes))
        io = payloads.get(ResourceKind.STORAGE)
        if io is not None and (io.bytes_read or io.bytes_written):
            tasks.append(atoms.AtomTask.storage(
                io.bytes_read, io.bytes_written, block_bytes))
        groups.append(SampleGroup(index, tasks))

    plan = EmulationPlan(groups, profile.command, profile.tags, block_bytes)
    if not plan.task_count():
        raise EmptyPlan('Profile of %r has nothing to emulate' %
                        profile.command)
    return plan


class GroupRecord(collections.namedtuple('GroupRecord',
                                         'index started_s ended_s atoms')):
    """The execution of one sample group."""
    __slots__ = ()

    def to_dict(self):
        return {'index': self.index, 'started_s': self.started_s,
                'ended_s': self.ended_s,
                'atoms': [atom.to_dict() for atom in self.atoms]}


class EmulationReport(object):
    """The outcome of an emulation run.

    Attributes:
        ttc_s: Wall time of the emulation.
        groups: A GroupRecord per executed group.
        planned: The plan totals per emulated metric.
        consumed: The totals reported by the atoms.
        measured: Counters of the emulating process read through the
            telemetry backend; empty without a backend.
        profile: The emulated Profile, when it was looked up in a store.
        recorded_id: The stored id of this run, once recorded.
    """

    def __init__(self, ttc_s, groups, planned, consumed, measured=None,
                 block_bytes=util.MiB, calibration=None, command=None,
                 failed_group=None, profile=None):
        self.ttc_s = ttc_s
        self.groups = list(groups)
        self.planned = dict(planned)
        self.consumed = dict(consumed)
        self.measured = dict(measured or {})
        self.block_bytes = block_bytes
        self.calibration = calibration
        self.command = command
        self.failed_group = failed_group
        self.profile = profile
        self.recorded_id = None

    @property
    def complete(self):
        return self.failed_group is None

    def deviations(self):
        """Return (consumed - planned) / planned for each planned metric."""
        result = {}
        for name, planned in six.iteritems(self.planned):
            if planned:
                result[name] = (self.consumed.get(name, 0) - planned) / \
                    float(planned)
        return result

    def check_barriers(self):
        """Verify that group intervals are ordered and disjoint.

        Raises:
            Error: naming the first pair of overlapping groups.
        """
        for previous, group in zip(self.groups, self.groups[1:]):
            starts = [group.started_s] + [a.started_s for a in group.atoms]
            ends = [previous.ended_s] + [a.ended_s for a in previous.atoms]
            if max(ends) > min(starts):
                raise Error('Group %d started before group %d ended' %
                            (group.index, previous.index))

    def as_profile(self, system, tags=(), created_at=None):
        """Return a record of this run keyed by the emulation command.

        The record carries the time to completion only; it allows storing
        emulation runs next to the profiles they emulate.
        """
        return model.Profile(
            command=store.EMULATION_PREFIX + (self.command or ''),
            tags=tags, system=system, series={},
            totals=model.Totals(self.ttc_s), sample_rate_hz=1.0,
            spawn_offset_s=0.0, created_at=created_at or util.utcnow(),
            exit_status=0 if self.complete else 1,
            flags=() if self.complete else
            (model.Profile.FLAG_TARGET_FAILED,),
            ttc_s=self.ttc_s)

    def to_dict(self):
        data = {
            'command': self.command,
            'ttc_s': self.ttc_s,
            'block_bytes': self.block_bytes,
            'planned': self.planned,
            'consumed': self.consumed,
            'measured': self.measured,
            'deviations': self.deviations(),
            'failed_group': self.failed_group,
            'groups': [group.to_dict() for group in self.groups],
        }
        if self.calibration is not None:
            data['calibration'] = self.calibration._asdict()
        return data

    def __repr__(self):
        return 'EmulationReport(ttc=%.3fs, groups=%d%s)' % (
            self.ttc_s, len(self.groups),
            '' if self.complete else ', failed')


def calibrate(use_perf=True, backend=None, iterations=CALIBRATION_ITERATIONS):
    """Measure the cost of a compute kernel iteration on this host.

    The kernel is profiled in two child processes running different
    iteration counts, with the same backend that profiles applications.

    Returns:
        A Calibration; the static one if the measurement fails.
    """
    log = logging.getLogger('pyworkload.emulator')
    backend = backend or telemetry.ProcBackend(use_perf=use_perf)
    profiler = sampler.Profiler(backend, config_.ProfilerConfig(
        sample_rate_hz=config_.MAX_SAMPLE_RATE_HZ,
        watchers_enabled=[ResourceKind.COMPUTE]))
    small_n, large_n = iterations
    try:
        small, large = [
            profiler.profile([sys.executable, '-m', 'pyworkload.atoms',
                              '--iterations', str(n)])
            for n in (small_n, large_n)]
    except (sampler.Error, telemetry.Error) as err:
        log.warning('calibration failed, using static costs: %s', err)
        return atoms.STATIC_CALIBRATION
    if small.failed or large.failed:
        log.warning('calibration kernel failed, using static costs')
        return atoms.STATIC_CALIBRATION
    diff = dict((name, max(0, getattr(large.totals, name) -
                           getattr(small.totals, name)))
                for name in model.DELTA_METRICS[ResourceKind.COMPUTE])
    if not diff['instructions']:
        log.warning('calibration measured no instructions')
        return atoms.STATIC_CALIBRATION
    calibration = atoms.Calibration(
        diff['instructions'] / float(large_n - small_n),
        model.derive_cpu_efficiency(diff['cycles_used'],
                                    diff['cycles_stalled_frontend'],
                                    diff['cycles_stalled_backend']),
        estimated=model.Profile.FLAG_ESTIMATED_CPU in large.flags)
    log.info('calibrated: %s', calibration)
    return calibration


def load_calibration(config, system=None, backend=None):
    """Return the cached calibration of this host, calibrating if needed.

    Args:
        config: The EmulatorConfig naming the cache file.
        system: The SystemInfo of the host.
        backend: The backend to calibrate with.
    """
    log = logging.getLogger('pyworkload.emulator')
    backend = backend or telemetry.ProcBackend(use_perf=config.use_perf)
    system = system or backend.read_system_info()
    key = util.content_hash(system.cpu_model, system.core_count,
                            system.max_freq_hz, config.use_perf)
    path = config.calibration_path
    cache = {}
    try:
        with open(path) as stream:
            cache = util.json_to_dict(stream.read())
        if key in cache:
            return atoms.Calibration(**cache[key])
    except (IOError, OSError):
        pass
    except (ValueError, TypeError, model.InvalidArgument) as err:
        log.warning('ignoring invalid calibration cache %s: %s', path, err)
        cache = {}
    calibration = calibrate(config.use_perf, backend)
    if calibration is not atoms.STATIC_CALIBRATION:
        cache[key] = calibration._asdict()
        try:
            directory = os.path.dirname(path)
            if directory and not os.path.isdir(directory):
                os.makedirs(directory)
            with open(path, 'w') as stream:
                stream.write(util.to_json(cache, pretty=True))
        except (IOError, OSError) as err:
            log.warning('unable to cache the calibration in %s: %s', path,
                        err)
    return calibration


class SelfMeasurement(object):
    """Reads the counters of the emulating process itself."""

    def __init__(self, backend):
        self.log = logging.getLogger('pyworkload.emulator')
        self.backend = backend
        self.target = telemetry.self_target()
        self._before = {}

    def start(self):
        try:
            for kind in model.SAMPLED_KINDS:
                self.backend.attach(self.target, kind)
                self._before[kind] = self.backend.snapshot(self.target, kind)
        except telemetry.Error as err:
            self.log.warning('self measurement unavailable: %s', err)
            self._before = {}

    def stop(self):
        """Return the emulated metrics measured since start()."""
        measured = {}
        try:
            for kind, before in six.iteritems(self._before):
                after = self.backend.snapshot(self.target, kind)
                payload = telemetry.delta(before, after)
                for name in model.DELTA_METRICS[kind]:
                    if name in model.EMULATED_METRICS:
                        measured[name] = getattr(payload, name)
                if kind == ResourceKind.MEMORY:
                    measured['peak_bytes'] = payload.peak_bytes
        except telemetry.Error as err:
            self.log.warning('self measurement failed: %s', err)
        finally:
            for kind in self._before:
                self.backend.detach(self.target, kind)
        return measured


class Emulator(object):
    """Executes emulation plans."""

    def __init__(self, config=None, calibration=None, backend=None):
        """Initialize a new Emulator.

        Args:
            config: An EmulatorConfig.
            calibration: The kernel Calibration; loaded from the cache (or
                measured) when a plan has compute tasks.
            backend: A telemetry backend measuring the emulation itself.
        """
        self.log = logging.getLogger('pyworkload.emulator')
        self.config = config or config_.EmulatorConfig()
        self.calibration = calibration
        self.backend = backend

    def _calibration(self, plan):
        if self.calibration is None:
            if not plan.totals()['instructions']:
                return atoms.STATIC_CALIBRATION
            self.calibration = load_calibration(self.config)
        return self.calibration

    def emulate(self, plan):
        """Execute a plan.

        Args:
            plan: A non-empty EmulationPlan.
        Returns:
            An EmulationReport.
        Raises:
            EmptyPlan: if the plan has no groups.
            AtomFailure: if an atom fails; its report covers the groups
                executed so far, the failing one included.
        """
        if not len(plan):
            raise EmptyPlan('Cannot emulate a plan without groups')
        calibration = self._calibration(plan)
        efficiency = self.config.efficiency
        kernel = atoms.ComputeKernel()
        pool = atoms.MemoryPool()
        scratch = atoms.ScratchSpace(self.config.scratch_dir,
                                     self.config.seed_bytes)
        cancel = threading.Event()

        def run(task):
            if task.kind == ResourceKind.COMPUTE:
                return atoms.compute_atom(
                    task.instructions, efficiency or task.efficiency,
                    calibration, self.config.quantum_s, kernel, cancel)
            if task.kind == ResourceKind.MEMORY:
                return atoms.memory_atom(task.allocate_bytes, task.free_bytes,
                                         task.block_bytes, pool)
            return atoms.storage_atom(task.read_bytes, task.write_bytes,
                                      task.block_bytes, scratch)

        measurement = None
        if self.backend is not None:
            measurement = SelfMeasurement(self.backend)
            measurement.start()
        self.log.info('emulating %r', plan)
        records = []
        failure = None
        started = time.monotonic()
        executor = futures.ThreadPoolExecutor(
            max_workers=len(model.PAYLOAD_TYPES))
        try:
            for group in plan:
                record, failure = self._run_group(executor, group, run)
                records.append(record)
                if failure is not None:
                    cancel.set()
                    break
        finally:
            executor.shutdown(wait=True)
            scratch.close()
            pool.release()
            ended = time.monotonic()
            measured = measurement.stop() if measurement else {}

        consumed = dict((name, 0) for name in model.EMULATED_METRICS)
        for record in records:
            for atom in record.atoms:
                for name, value in six.iteritems(atom.consumed()):
                    consumed[name] += value
        report = EmulationReport(
            ended - started, records, plan.totals(), consumed, measured,
            block_bytes=plan.block_bytes, calibration=calibration,
            command=plan.command,
            failed_group=records[-1].index if failure else None)
        if failure is not None:
            task, err = failure
            raise AtomFailure(records[-1].index, task.kind, report, err)
        self.log.info('emulated %r in %.3fs', plan.command, report.ttc_s)
        return report

    def _run_group(self, executor, group, run):
        started = time.monotonic()
        pending = dict((executor.submit(run, task), task)
                       for task in group.tasks)
        futures.wait(pending)
        ended = time.monotonic()
        reports = []
        failure = None
        for future, task in six.iteritems(pending):
            err = future.exception()
            if err is None:
                reports.append(future.result())
            elif failure is None:
                self.log.error('group %d: %s', group.index, err)
                failure = (task, err)
        reports.sort(key=lambda report: report.kind.value)
        self.log.debug('group %d: %d atoms in %.3fs', group.index,
                       len(reports), ended - started)
        return GroupRecord(group.index, started, ended, tuple(reports)), \
            failure


def emulate(plan, config=None, calibration=None, backend=None):
    """Execute a plan with a new Emulator."""
    return Emulator(config, calibration, backend).emulate(plan)


def emulate_command(command, tags=None, source=None, created_at=None,
                    config=None, calibration=None, backend=None, load=None,
                    record=False):
    """Emulate the stored profile of a command.

    Args:
        command: The profiled command line or argument list.
        tags: The tags of the profile.
        source: A Store or a locator (default the configured store).
        created_at: The datetime of the repeat to emulate; the most
            recent one by default.
        config: An EmulatorConfig.
        calibration: The kernel Calibration.
        backend: A telemetry backend measuring the emulation itself.
        load: A callable returning a LoadHandle, started once the plan
            is ready and released when the emulation ends.
        record: Whether to store the run under the emulation key.
    Returns:
        An EmulationReport carrying the emulated profile.
    Raises:
        store.ProfileNotFound: if no profile matches.
        EmptyPlan: if the profile consumed nothing.
        LoadError: if the background load cannot be started.
        AtomFailure: if an atom fails.
    """
    log = logging.getLogger('pyworkload.emulator')
    config = config or config_.EmulatorConfig()
    if not isinstance(source, store.Store):
        source = store.open_store(source or config_.store_locator())
    profile = source.select(store.ProfileKey(command, tags), created_at)
    plan = plan_from_profile(profile, config.block_bytes, config.efficiency)
    handle = load() if load is not None else None
    try:
        report = Emulator(config, calibration, backend).emulate(plan)
    except AtomFailure as err:
        err.report.profile = profile
        raise
    finally:
        if handle is not None:
            handle.release()
    report.profile = profile
    if record:
        report.recorded_id = source.save(
            report.as_profile(profile.system, profile.tags))
        log.info('recorded emulation of %r as %s', profile.command,
                 report.recorded_id)
    return report


def _cpu_load(fraction, stop):
    kernel = atoms.ComputeKernel()
    while not stop.is_set():
        started = time.monotonic()
        busy_until = started + LOAD_PERIOD_S * fraction
        while time.monotonic() < busy_until:
            kernel.run(1)
        stop.wait(max(0.0, started + LOAD_PERIOD_S - time.monotonic()))


def _disk_load(bytes_per_s, block_bytes, scratch_dir, stop, written):
    fd, path = tempfile.mkstemp(prefix='pyworkload-load-', dir=scratch_dir)
    block = memoryview(bytearray(b'\x5a' * block_bytes))
    try:
        started = time.monotonic()
        total = 0
        offset = 0
        while not stop.is_set():
            ahead = started + total / bytes_per_s - time.monotonic()
            if ahead > 0:
                stop.wait(ahead)
                continue
            if offset + block_bytes > atoms.WRITE_WRAP_BYTES:
                os.lseek(fd, 0, os.SEEK_SET)
                offset = 0
            atoms._write_all(fd, block)
            offset += block_bytes
            total += block_bytes
            written.value = total
    finally:
        os.close(fd)
        os.unlink(path)


def _memory_load(size, stop, ready, failed):
    pool = atoms.MemoryPool()
    try:
        for block in atoms.block_sizes(size, 64 * util.MiB):
            pool.allocate(block)
    except MemoryError:
        failed.value = 1
    ready.set()
    stop.wait()


class LoadHandle(object):
    """Background load processes, running until released."""

    def __init__(self, stop, processes=(), written=None, memory_pid=None):
        self.log = logging.getLogger('pyworkload.emulator')
        self._stop = stop
        self.processes = list(processes)
        self._written = written
        self.memory_pid = memory_pid

    @property
    def active(self):
        return any(process.is_alive() for process in self.processes)

    @property
    def pids(self):
        return [process.pid for process in self.processes]

    @property
    def bytes_written(self):
        if self._written is None:
            return 0
        return self._written.value

    def hold(self, duration_s=None):
        """Keep the load for duration_s, or until interrupted."""
        if not self.processes:
            return
        self._stop.wait(duration_s)

    def release(self):
        """Stop all load processes."""
        self._stop.set()
        for process in self.processes:
            process.join(5)
            if process.is_alive():
                process.terminate()
                process.join()
        self.log.info('released background load')

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.release()


def background_load(cpu_fraction=0.0, disk_mbps=0.0, mem_bytes=0,
                    scratch_dir=None, block_bytes=util.MiB, timeout_s=60.0):
    """Start artificial CPU, disk and memory load in separate processes.

    Args:
        cpu_fraction: Cores to keep busy; fractions duty cycle one core.
        disk_mbps: Megabytes (10^6 bytes) per second to write.
        mem_bytes: Bytes of memory to hold resident.
        scratch_dir: Directory of the disk load file.
        block_bytes: Write size of the disk load.
        timeout_s: How long to wait for the memory to be allocated.
    Returns:
        A LoadHandle; release it to stop the load.
    Raises:
        LoadError: if a parameter is negative or the memory cannot be
            allocated.
    """
    log = logging.getLogger('pyworkload.emulator')
    if cpu_fraction < 0 or disk_mbps < 0 or mem_bytes < 0:
        raise LoadError('Loads must be >= 0')
    if mem_bytes:
        available = psutil.virtual_memory().available
        if mem_bytes > available:
            raise LoadError('Cannot hold %s of memory, %s available' % (
                util.format_size(mem_bytes), util.format_size(available)))

    ctx = multiprocessing.get_context()
    stop = ctx.Event()
    processes = []
    written = None
    ready = failed = None
    full, partial = divmod(cpu_fraction, 1.0)
    shares = [1.0] * int(full) + ([partial] if partial > 1e-3 else [])
    for share in shares:
        processes.append(ctx.Process(target=_cpu_load, args=(share, stop),
                                     name='load-cpu'))
    if disk_mbps:
        rate = disk_mbps * 1e6
        written = ctx.Value('q', 0)
        processes.append(ctx.Process(
            target=_disk_load, name='load-disk',
            args=(rate, int(min(block_bytes, max(4096, rate * 0.1))),
                  scratch_dir or tempfile.gettempdir(), stop, written)))
    memory = None
    if mem_bytes:
        ready, failed = ctx.Event(), ctx.Value('i', 0)
        memory = ctx.Process(target=_memory_load, name='load-memory',
                             args=(mem_bytes, stop, ready, failed))
        processes.append(memory)
    for process in processes:
        process.daemon = True
        process.start()
    handle = LoadHandle(stop, processes, written,
                        memory.pid if memory else None)
    if memory is not None:
        if not ready.wait(timeout_s) or failed.value:
            handle.release()
            raise LoadError('Unable to hold %s of memory' %
                            util.format_size(mem_bytes))
    log.info('background load: cpu %g, disk %g MB/s, memory %s',
             cpu_fraction, disk_mbps, util.format_size(mem_bytes))
    return handle
