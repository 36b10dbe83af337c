"""Counter backends reading the resource consumption of a target process.

A backend spawns target processes and reports cumulative counters for
them. The OS backend reads process accounting through psutil and
hardware counters through ``perf stat``; the scripted backend in
``pyworkload.testing.synthetic`` replays a known trajectory.
"""

import collections
import logging
import os
import platform
import re
import subprocess
import sys
import threading
import time
import psutil
try:
    import resource
except ImportError:
    resource = None
from pyworkload import model
from pyworkload.model import ResourceKind


class Error(Exception):
    """Base exception class for this module."""


class BackendUnavailable(Error):
    """A counter source of the operating system cannot be read."""

    def __init__(self, msg=None, facility=None):
        if msg is None:
            msg = 'Counter source unavailable: %s' % facility
        Error.__init__(self, msg)
        self.facility = facility


class TargetVanished(Error):
    """The target process is gone. This ends sampling normally."""

    def __init__(self, pid=None):
        Error.__init__(self, 'Target process %s has exited' % pid)
        self.pid = pid


class ProbeTarget(collections.namedtuple('ProbeTarget',
                                         'pid spawn_timestamp_s')):
    """A process spawned by this run, and its monotonic spawn time."""
    __slots__ = ()


class CounterSnapshot(collections.namedtuple('CounterSnapshot',
                                             'taken_at_s kind payload')):
    """Cumulative counters of one kind since the target was spawned.

    The payload uses the sample types of the model, but its counters are
    cumulative. Resident memory and thread counts are levels and may
    decrease between snapshots.
    """
    __slots__ = ()


class WrapAccounting(collections.namedtuple('WrapAccounting',
                                            'peak_bytes cpu_time_us')):
    """Resource accounting of the reaped target process.

    peak_bytes is None when the reaped peak cannot be told apart from the
    memory the target inherited from its spawner before exec.
    """
    __slots__ = ()


def delta(previous, current):
    """Return the sample payload between two snapshots of one kind.

    Cumulative counters are differenced, levels are taken from the later
    snapshot. Counters never go negative; a counter source restarting
    below its previous value yields a zero delta.

    Args:
        previous: The earlier CounterSnapshot, or None for the spawn.
        current: The later CounterSnapshot.
    Returns:
        A CpuSample, MemSample or IoSample.
    """
    payload_type = type(current.payload)
    levels = model.MAX_METRICS[current.kind]
    values = {}
    for name in payload_type._fields:
        value = getattr(current.payload, name)
        if name not in levels and previous is not None:
            value = max(0, value - getattr(previous.payload, name))
        values[name] = value
    return payload_type(**values)


def exit_code(status):
    """Convert a wait status to a Popen-style return code."""
    if os.WIFSIGNALED(status):
        return -os.WTERMSIG(status)
    return os.WEXITSTATUS(status)


# A reaped peak within this much of the spawner's own peak may be the
# memory the child shared with the spawner between fork and exec.
INHERITED_SLACK_BYTES = 4 << 20


def spawner_peak_bytes():
    """Return the peak resident memory of this process, or 0."""
    if resource is None:
        return 0
    return maxrss_bytes(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


def maxrss_bytes(maxrss):
    """Convert ru_maxrss to bytes (Linux reports KiB, macOS bytes)."""
    if sys.platform == 'darwin':
        return int(maxrss)
    return int(maxrss) * 1024


class TargetProcess(object):
    """A spawned target process.

    The process is reaped by a waiter thread with ``wait4`` so that its
    resource usage is available once it has exited.
    """

    def __init__(self, args, env=None, cwd=None, stdout=None, stderr=None):
        """Spawn a new target process.

        Args:
            args: The argument list to execute.
            env: Optional environment for the child.
            cwd: Optional working directory for the child.
            stdout: Optional file object for the child's stdout.
            stderr: Optional file object for the child's stderr.
        Raises:
            OSError: if the command cannot be spawned.
        """
        self.log = logging.getLogger('pyworkload.telemetry')
        self.spawner_peak_bytes = spawner_peak_bytes()
        self._popen = subprocess.Popen(args, env=env, cwd=cwd,
                                       stdout=stdout, stderr=stderr)
        self.target = ProbeTarget(self._popen.pid, time.monotonic())
        self.returncode = None
        self.accounting = None
        self.exited_at_s = None
        self._done = threading.Event()
        self._waiter = threading.Thread(target=self._wait,
                                        name='waiter-%d' % self.target.pid)
        self._waiter.daemon = True
        self._waiter.start()

    def _wait(self):
        if hasattr(os, 'wait4'):
            _, status, rusage = os.wait4(self._popen.pid, 0)
            self.exited_at_s = time.monotonic()
            self.returncode = exit_code(status)
            self.accounting = WrapAccounting(
                peak_bytes=self._reaped_peak(rusage.ru_maxrss),
                cpu_time_us=int(round(
                    (rusage.ru_utime + rusage.ru_stime) * 1e6)))
            # the child is reaped; keep Popen from waiting on it again
            self._popen.returncode = self.returncode
        else:
            self.returncode = self._popen.wait()
            self.exited_at_s = time.monotonic()
        self.log.info('target %d exited with status %d',
                      self.target.pid, self.returncode)
        self._done.set()

    def _reaped_peak(self, maxrss):
        peak = maxrss_bytes(maxrss)
        if peak <= self.spawner_peak_bytes + INHERITED_SLACK_BYTES:
            self.log.debug('reaped peak of %d (%d bytes) may be inherited',
                           self.target.pid, peak)
            return None
        return peak

    def poll(self):
        """Return the exit status, or None while the target runs."""
        if self._done.is_set():
            return self.returncode
        return None

    def wait(self, timeout=None):
        """Wait for the target to exit.

        Returns:
            The exit status, or None if the timeout expired.
        """
        if self._done.wait(timeout):
            return self.returncode
        return None

    def kill(self):
        """Kill the target if it is still running."""
        if not self._done.is_set():
            try:
                self._popen.kill()
            except OSError:
                pass


class Backend(object):
    """Interface of a counter backend."""

    def clock(self):
        """Return monotonic seconds on the clock of the backend."""
        return time.monotonic()

    def read_system_info(self):
        """Return the static SystemInfo of the host."""
        raise NotImplementedError

    def system_load(self):
        """Return the 1-minute load average, or None if unknown."""
        return None

    def spawn(self, args, env=None):
        """Spawn a target command and return its TargetProcess."""
        raise NotImplementedError

    def attach(self, target, kind):
        """Prepare counters of one kind for a target."""

    def detach(self, target, kind):
        """Release counters of one kind for a target."""

    def snapshot(self, target, kind):
        """Return a CounterSnapshot of one kind for a target.

        Raises:
            TargetVanished: if the target has exited.
            BackendUnavailable: if the counter source cannot be read.
        """
        raise NotImplementedError

    def final_snapshot(self, target, kind):
        """Return the last counters of a target which has exited."""
        raise NotImplementedError

    def counters_estimated(self, target):
        """Return True if hardware counters were replaced by estimates."""
        return False


# perf stat CSV interval lines: time,count,unit,event,...
PERF_LINE = re.compile(r'^\s*([0-9.]+),([^,]*),[^,]*,([a-zA-Z0-9_.:/-]+)')

PERF_EVENTS = collections.OrderedDict([
    ('instructions', 'instructions'),
    ('cycles', 'cycles_used'),
    ('stalled-cycles-frontend', 'cycles_stalled_frontend'),
    ('stalled-cycles-backend', 'cycles_stalled_backend'),
])


class PerfReader(object):
    """Accumulates hardware counters of a process from ``perf stat -I``."""

    def __init__(self, pid, interval_ms=100, perf='perf'):
        self.log = logging.getLogger('pyworkload.telemetry')
        self.pid = pid
        self.counts = dict((field, 0) for field in PERF_EVENTS.values())
        self.failed = False
        self.lines = 0
        self._lock = threading.Lock()
        args = [perf, 'stat', '-x', ',', '-I', str(interval_ms),
                '-e', ','.join(PERF_EVENTS), '-p', str(pid)]
        try:
            self._process = subprocess.Popen(
                args, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
                universal_newlines=True)
        except OSError as err:
            self.log.warning('perf unavailable: %s', err)
            self.failed = True
            self._process = None
            self._thread = None
            return
        self._thread = threading.Thread(target=self._read,
                                        name='perf-%d' % pid)
        self._thread.daemon = True
        self._thread.start()

    def _read(self):
        for line in self._process.stderr:
            match = PERF_LINE.match(line)
            if not match:
                if line.strip() and not line.startswith('#'):
                    self.log.debug('perf: %s', line.rstrip())
                continue
            _, count, event = match.groups()
            field = PERF_EVENTS.get(event.split(':')[0])
            if field is None:
                continue
            try:
                value = int(float(count))
            except ValueError:
                # <not supported> and <not counted>
                continue
            with self._lock:
                self.counts[field] += value
                self.lines += 1
        status = self._process.wait()
        if status != 0 and not self.lines:
            self.log.warning('perf stat exited with %d without counts; '
                             'falling back to CPU time estimates', status)
            self.failed = True

    def read(self):
        """Return a copy of the accumulated counts."""
        with self._lock:
            return dict(self.counts)

    def finish(self, timeout=2.0):
        """Wait for perf to flush the counts of an exited process."""
        if self._thread is not None:
            self._thread.join(timeout)

    def stop(self):
        if self._process is not None and self._process.poll() is None:
            try:
                self._process.terminate()
            except OSError:
                pass
        self.finish()


class _TargetState(object):
    """Per-target bookkeeping of the OS backend."""

    def __init__(self, process):
        self.process = process
        self.perf = None
        self.estimated = False
        self.peak = 0
        self.resident = 0
        self.allocated = 0
        self.freed = 0
        self.last = {}
        self.kinds = set()


class ProcBackend(Backend):
    """Counter backend for real processes.

    Process accounting comes from psutil (the /proc filesystem on Linux),
    hardware counters from ``perf stat``. Without usable hardware counters
    the CPU counters are estimated from the process CPU time at the
    nominal maximum clock rate.

    The backend is internally synchronized and may be polled by one
    sampling loop per resource kind.
    """

    def __init__(self, use_perf=True, perf='perf', perf_interval_ms=100):
        self.log = logging.getLogger('pyworkload.telemetry')
        self.use_perf = use_perf
        self.perf = perf
        self.perf_interval_ms = perf_interval_ms
        self._lock = threading.Lock()
        self._targets = {}
        self._system = None

    def read_system_info(self):
        if self._system is None:
            self._system = model.SystemInfo(
                core_count=self._core_count(),
                max_freq_hz=self._max_freq_hz(),
                total_memory_bytes=self._total_memory(),
                os_descriptor=platform.platform(),
                cpu_model=self._cpu_model())
            self.log.info('system: %s', self._system)
        return self._system

    def _core_count(self):
        count = psutil.cpu_count(logical=True)
        if not count:
            raise BackendUnavailable(facility='cpu count')
        return count

    def _max_freq_hz(self):
        try:
            freq = psutil.cpu_freq()
        except (NotImplementedError, OSError, AttributeError):
            freq = None
        if freq is not None:
            mhz = freq.max or freq.current
            if mhz:
                return mhz * 1e6
        mhz = 0.0
        try:
            with open('/proc/cpuinfo') as cpuinfo:
                for line in cpuinfo:
                    if line.lower().startswith('cpu mhz'):
                        mhz = max(mhz, float(line.split(':')[1]))
        except (IOError, OSError, ValueError):
            pass
        if not mhz:
            raise BackendUnavailable(facility='cpu frequency')
        return mhz * 1e6

    def _total_memory(self):
        try:
            return psutil.virtual_memory().total
        except (OSError, RuntimeError):
            raise BackendUnavailable(facility='total memory')

    def _cpu_model(self):
        try:
            with open('/proc/cpuinfo') as cpuinfo:
                for line in cpuinfo:
                    if line.lower().startswith('model name'):
                        return line.split(':', 1)[1].strip()
        except (IOError, OSError):
            pass
        return platform.processor()

    def system_load(self):
        try:
            return os.getloadavg()[0]
        except (AttributeError, OSError):
            return None

    def spawn(self, args, env=None):
        process = TargetProcess(args, env=env)
        self.log.info('spawned %d: %s', process.target.pid, args)
        return process

    def _state(self, target):
        with self._lock:
            state = self._targets.get(target.pid)
            if state is None:
                try:
                    process = psutil.Process(target.pid)
                except psutil.NoSuchProcess:
                    raise TargetVanished(target.pid)
                state = _TargetState(process)
                self._targets[target.pid] = state
            return state

    def attach(self, target, kind):
        kind = ResourceKind.parse(kind)
        state = self._state(target)
        with self._lock:
            state.kinds.add(kind)
        if kind == ResourceKind.COMPUTE:
            if self.use_perf:
                state.perf = PerfReader(target.pid, self.perf_interval_ms,
                                        self.perf)
            else:
                state.perf = None
            state.estimated = state.perf is None or state.perf.failed

    def detach(self, target, kind):
        """Stop watching a kind; the target is forgotten after its last."""
        kind = ResourceKind.parse(kind)
        with self._lock:
            state = self._targets.get(target.pid)
            if state is None:
                return
            state.kinds.discard(kind)
            if not state.kinds:
                del self._targets[target.pid]
        if kind == ResourceKind.COMPUTE and state.perf is not None:
            state.perf.stop()

    def counters_estimated(self, target):
        with self._lock:
            state = self._targets.get(target.pid)
        if state is None:
            return not self.use_perf
        return state.estimated or (state.perf is not None and
                                   state.perf.failed)

    def snapshot(self, target, kind):
        kind = ResourceKind.parse(kind)
        state = self._state(target)
        try:
            with state.process.oneshot():
                if kind == ResourceKind.COMPUTE:
                    payload = self._compute(state)
                elif kind == ResourceKind.MEMORY:
                    payload = self._memory(state, target)
                elif kind == ResourceKind.STORAGE:
                    payload = self._storage(state)
                else:
                    raise BackendUnavailable(facility=kind.value)
        except (psutil.NoSuchProcess, psutil.ZombieProcess):
            raise TargetVanished(target.pid)
        except psutil.AccessDenied as err:
            raise BackendUnavailable(facility='%s accounting (%s)' %
                                     (kind.value, err))
        snap = CounterSnapshot(time.monotonic(), kind, payload)
        with self._lock:
            state.last[kind] = snap
        return snap

    def final_snapshot(self, target, kind):
        kind = ResourceKind.parse(kind)
        with self._lock:
            state = self._targets.get(target.pid)
        last = state.last.get(kind) if state is not None else None
        if (kind == ResourceKind.COMPUTE and state is not None and
                state.perf is not None):
            state.perf.finish()
            if last is not None and not self.counters_estimated(target):
                counts = state.perf.read()
                payload = last.payload._replace(**counts)
                last = CounterSnapshot(time.monotonic(), kind, payload)
        if last is None:
            last = CounterSnapshot(time.monotonic(), kind,
                                   model.PAYLOAD_TYPES[kind]())
        return last

    def _compute(self, state):
        times = state.process.cpu_times()
        cpu_time = times.user + times.system
        values = {
            'cpu_time_us': int(round(cpu_time * 1e6)),
            'threads': state.process.num_threads(),
        }
        if state.perf is not None and not state.perf.failed:
            values.update(state.perf.read())
        else:
            if not state.estimated:
                self.log.warning('hardware counters unavailable for %d, '
                                 'estimating from CPU time',
                                 state.process.pid)
                state.estimated = True
            cycles = int(round(cpu_time * self.read_system_info().max_freq_hz))
            values.update(instructions=cycles, cycles_used=cycles)
        return model.CpuSample(**values)

    def _memory(self, state, target):
        resident = state.process.memory_info().rss
        peak = self._high_water_mark(target.pid)
        with self._lock:
            change = resident - state.resident
            if change > 0:
                state.allocated += change
            else:
                state.freed -= change
            state.resident = resident
            state.peak = max(state.peak, peak or 0, resident)
            return model.MemSample(peak_bytes=state.peak,
                                   resident_bytes=resident,
                                   allocated_bytes=state.allocated,
                                   freed_bytes=state.freed)

    def _high_water_mark(self, pid):
        try:
            with open('/proc/%d/status' % pid) as status:
                for line in status:
                    if line.startswith('VmHWM:'):
                        return int(line.split()[1]) * 1024
        except (IOError, OSError, ValueError):
            pass
        return None

    def _storage(self, state):
        if not hasattr(state.process, 'io_counters'):
            raise BackendUnavailable(facility='process I/O accounting')
        counters = state.process.io_counters()
        read = getattr(counters, 'read_chars', None)
        written = getattr(counters, 'write_chars', None)
        if read is None or written is None:
            read, written = counters.read_bytes, counters.write_bytes
        return model.IoSample(bytes_read=read, bytes_written=written)


def default_backend(**kwargs):
    """Return the OS backend for this host."""
    return ProcBackend(**kwargs)


def self_target():
    """Return a ProbeTarget for the calling process itself."""
    process = psutil.Process()
    return ProbeTarget(process.pid, time.monotonic())
