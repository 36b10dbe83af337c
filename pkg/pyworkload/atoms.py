"""Emulation atoms: small kernels consuming one kind of resource each.

Every atom consumes an exact quantity of its resource and returns an
AtomReport of what it consumed:

    compute_atom   runs a cache resident matrix multiplication until an
                   instruction budget is spent, duty cycled to a target
                   efficiency
    memory_atom    allocates (touching every page) and frees memory in
                   blocks
    storage_atom   reads from a pre-seeded scratch file and writes to a
                   scratch file in blocks

Atoms are plain functions so that they can run in worker threads; the
state kept between atom invocations lives in a MemoryPool and a
ScratchSpace.

Running this module executes the compute kernel a given number of times,
which is how the kernel is calibrated:

    python -m pyworkload.atoms --iterations 10000
"""

import argparse
import collections
import errno
import logging
import math
import os
import tempfile
import time
import numpy
from pyworkload import model
from pyworkload import util
from pyworkload.model import ResourceKind


# Side length of the square matrices of the compute kernel. Three float64
# matrices of this size fit into the L2 cache of common CPUs.
KERNEL_SIZE = 64
PAGE_BYTES = os.sysconf('SC_PAGE_SIZE') if hasattr(os, 'sysconf') else 4096
# The write scratch file is rewound once it reaches this size.
WRITE_WRAP_BYTES = 64 * util.MiB


class Error(Exception):
    """Base exception class for this module."""


class AtomError(Error):
    """An atom could not consume its quantity."""

    def __init__(self, kind=None, reason=None):
        Error.__init__(self, '%s atom failed: %s' % (
            getattr(kind, 'value', kind), reason))
        self.kind = kind
        self.reason = reason


class AtomTask(collections.namedtuple(
        'AtomTask', 'kind instructions efficiency allocate_bytes free_bytes '
                    'read_bytes write_bytes block_bytes')):
    """One quantity of one resource kind to consume."""
    __slots__ = ()

    def __new__(cls, kind, instructions=0, efficiency=1.0, allocate_bytes=0,
                free_bytes=0, read_bytes=0, write_bytes=0,
                block_bytes=util.MiB):
        kind = ResourceKind.parse(kind)
        if kind not in model.PAYLOAD_TYPES:
            raise model.InvalidArgument('No atom consumes %s' % kind.value)
        for name, value in (('instructions', instructions),
                            ('allocate_bytes', allocate_bytes),
                            ('free_bytes', free_bytes),
                            ('read_bytes', read_bytes),
                            ('write_bytes', write_bytes)):
            if value < 0:
                raise model.InvalidArgument('%s must be >= 0, got %r' %
                                            (name, value))
        if block_bytes <= 0:
            raise model.InvalidArgument('block_bytes must be > 0, got %r' %
                                        block_bytes)
        if not 0.0 < efficiency <= 1.0:
            raise model.InvalidArgument('efficiency must be within (0, 1], '
                                        'got %r' % efficiency)
        return super(AtomTask, cls).__new__(
            cls, kind, int(instructions), float(efficiency),
            int(allocate_bytes), int(free_bytes), int(read_bytes),
            int(write_bytes), int(block_bytes))

    @classmethod
    def compute(cls, instructions, efficiency=1.0):
        return cls(ResourceKind.COMPUTE, instructions=instructions,
                   efficiency=efficiency)

    @classmethod
    def memory(cls, allocate_bytes, free_bytes=0, block_bytes=util.MiB):
        return cls(ResourceKind.MEMORY, allocate_bytes=allocate_bytes,
                   free_bytes=free_bytes, block_bytes=block_bytes)

    @classmethod
    def storage(cls, read_bytes, write_bytes=0, block_bytes=util.MiB):
        return cls(ResourceKind.STORAGE, read_bytes=read_bytes,
                   write_bytes=write_bytes, block_bytes=block_bytes)

    def quantities(self):
        """Return the emulated metrics this task consumes."""
        if self.kind == ResourceKind.COMPUTE:
            return {'instructions': self.instructions}
        if self.kind == ResourceKind.MEMORY:
            return {'allocated_bytes': self.allocate_bytes,
                    'freed_bytes': self.free_bytes}
        return {'bytes_read': self.read_bytes,
                'bytes_written': self.write_bytes}


class AtomReport(collections.namedtuple(
        'AtomReport', 'kind started_s ended_s operations instructions '
                      'allocated_bytes freed_bytes bytes_read bytes_written')):
    """What an atom consumed, and when it ran on the monotonic clock."""
    __slots__ = ()

    def __new__(cls, kind, started_s, ended_s, operations=0, instructions=0,
                allocated_bytes=0, freed_bytes=0, bytes_read=0,
                bytes_written=0):
        return super(AtomReport, cls).__new__(
            cls, ResourceKind.parse(kind), started_s, ended_s, operations,
            instructions, allocated_bytes, freed_bytes, bytes_read,
            bytes_written)

    @property
    def duration_s(self):
        return self.ended_s - self.started_s

    def consumed(self):
        """Return the emulated metrics consumed by the atom."""
        return dict((name, getattr(self, name))
                    for name in model.EMULATED_METRICS)

    def to_dict(self):
        data = self._asdict()
        data['kind'] = self.kind.value
        return data


class Calibration(collections.namedtuple(
        'Calibration', 'instructions_per_iteration efficiency_ceiling '
                       'estimated')):
    """The measured cost of one compute kernel iteration on a host."""
    __slots__ = ()

    def __new__(cls, instructions_per_iteration, efficiency_ceiling=1.0,
                estimated=False):
        if instructions_per_iteration <= 0:
            raise model.InvalidArgument(
                'instructions_per_iteration must be > 0, got %r' %
                instructions_per_iteration)
        if not 0.0 < efficiency_ceiling <= 1.0:
            efficiency_ceiling = 1.0
        return super(Calibration, cls).__new__(
            cls, float(instructions_per_iteration), float(efficiency_ceiling),
            bool(estimated))


# Used when the kernel cannot be measured: one 64x64 double precision
# multiplication is 262144 multiply-adds, about 120k vector instructions
# including loads, stores and the call overhead.
STATIC_CALIBRATION = Calibration(120000.0, 1.0, estimated=True)


def block_sizes(total_bytes, block_bytes):
    """Yield the sizes of the blocks moving total_bytes.

    All blocks are block_bytes large except a smaller final block.
    """
    full, rest = divmod(total_bytes, block_bytes)
    for _ in range(full):
        yield block_bytes
    if rest:
        yield rest


class ComputeKernel(object):
    """A matrix multiplication with a cache resident working set."""

    def __init__(self, size=KERNEL_SIZE):
        rng = numpy.random.RandomState(size)
        self.a = rng.random_sample((size, size))
        self.b = rng.random_sample((size, size))
        self.c = numpy.empty((size, size))

    def run(self, iterations):
        a, b, c = self.a, self.b, self.c
        for _ in range(iterations):
            numpy.dot(a, b, out=c)


def compute_atom(instructions, efficiency_target=1.0, calibration=None,
                 quantum_s=0.01, kernel=None, cancel=None):
    """Execute an instruction budget at a target efficiency.

    The kernel runs in batches of about quantum_s. Efficiencies below the
    calibrated ceiling of the kernel are reached by sleeping after each
    batch, so that the kernel is busy only for a matching fraction of the
    time.

    Args:
        instructions: The instruction budget.
        efficiency_target: The efficiency to emulate, within (0, 1].
        calibration: The Calibration of the kernel (default the static one).
        quantum_s: The duration of one busy batch.
        kernel: A ComputeKernel to reuse.
        cancel: An Event ending the atom early.
    Returns:
        An AtomReport.
    """
    if instructions < 0:
        raise model.InvalidArgument('instructions must be >= 0')
    if not 0.0 < efficiency_target <= 1.0:
        raise model.InvalidArgument('efficiency_target must be within (0, 1]')
    calibration = calibration or STATIC_CALIBRATION
    started = time.monotonic()
    iterations = int(math.ceil(instructions /
                               calibration.instructions_per_iteration))
    if not iterations:
        return AtomReport(ResourceKind.COMPUTE, started, time.monotonic())
    kernel = kernel or ComputeKernel()
    duty = min(1.0, efficiency_target / calibration.efficiency_ceiling)
    done = 0
    batch = 1
    while done < iterations:
        if cancel is not None and cancel.is_set():
            break
        n = min(batch, iterations - done)
        t0 = time.monotonic()
        kernel.run(n)
        busy = time.monotonic() - t0
        done += n
        if busy > 0:
            batch = max(1, int(n * quantum_s / busy))
        else:
            batch *= 2
        if duty < 1.0 and done < iterations:
            time.sleep(busy * (1.0 / duty - 1.0))
    return AtomReport(
        ResourceKind.COMPUTE, started, time.monotonic(), operations=done,
        instructions=int(round(done * calibration.instructions_per_iteration)))


class MemoryPool(object):
    """Memory blocks held between memory atom invocations."""

    def __init__(self):
        self.blocks = []

    @property
    def held_bytes(self):
        return sum(block.nbytes for block in self.blocks)

    def allocate(self, size):
        block = numpy.empty(size, dtype=numpy.uint8)
        # one write per page makes the block resident
        block[::PAGE_BYTES] = 1
        self.blocks.append(block)

    def free(self, size):
        """Release up to size bytes, newest blocks first.

        Returns:
            The number of bytes released.
        """
        freed = 0
        while self.blocks and freed < size:
            block = self.blocks[-1]
            remaining = size - freed
            if block.nbytes <= remaining:
                self.blocks.pop()
                freed += block.nbytes
            else:
                self.blocks[-1] = block[:block.nbytes - remaining].copy()
                freed += remaining
        return freed

    def release(self):
        del self.blocks[:]


def memory_atom(allocate_bytes, free_bytes, block_bytes=util.MiB, pool=None):
    """Allocate and then free memory in blocks.

    Args:
        allocate_bytes: Bytes to allocate; every page is touched.
        free_bytes: Bytes to release from the pool.
        block_bytes: Allocation size of a block.
        pool: The MemoryPool holding allocations between atoms.
    Returns:
        An AtomReport.
    Raises:
        AtomError: if the memory cannot be allocated.
    """
    pool = pool if pool is not None else MemoryPool()
    started = time.monotonic()
    operations = 0
    try:
        for size in block_sizes(allocate_bytes, block_bytes):
            pool.allocate(size)
            operations += 1
    except MemoryError:
        raise AtomError(ResourceKind.MEMORY, 'unable to allocate %s' %
                        util.format_size(allocate_bytes))
    freed = pool.free(free_bytes)
    if freed:
        operations += 1
    return AtomReport(ResourceKind.MEMORY, started, time.monotonic(),
                      operations=operations, allocated_bytes=allocate_bytes,
                      freed_bytes=freed)


class ScratchSpace(object):
    """The files of the storage atom.

    Reads come from a seed file which is kept between runs, so that it is
    written once per scratch directory only. Writes go to a private file
    removed by close().
    """

    def __init__(self, scratch_dir=None, seed_bytes=16 * util.MiB):
        self.log = logging.getLogger('pyworkload.atoms')
        self.scratch_dir = scratch_dir or tempfile.gettempdir()
        self.seed_bytes = seed_bytes
        self.seed_path = os.path.join(self.scratch_dir,
                                      'pyworkload-seed-%d.bin' % seed_bytes)
        self._read_fd = None
        self._write_fd = None
        self.write_path = None
        self.read_offset = 0
        self.write_offset = 0

    def _seed(self):
        try:
            if os.path.getsize(self.seed_path) == self.seed_bytes:
                return
        except OSError:
            pass
        self.log.info('seeding %s with %s', self.seed_path,
                      util.format_size(self.seed_bytes))
        fd, temp = tempfile.mkstemp(prefix='.pyworkload-seed-',
                                    dir=self.scratch_dir)
        try:
            chunk = os.urandom(min(self.seed_bytes, util.MiB))
            for size in block_sizes(self.seed_bytes, len(chunk)):
                _write_all(fd, memoryview(chunk)[:size])
        finally:
            os.close(fd)
        os.rename(temp, self.seed_path)

    def read_fd(self):
        if self._read_fd is None:
            self._seed()
            self._read_fd = os.open(self.seed_path, os.O_RDONLY)
        return self._read_fd

    def write_fd(self):
        if self._write_fd is None:
            self._write_fd, self.write_path = tempfile.mkstemp(
                prefix='pyworkload-write-', dir=self.scratch_dir)
        return self._write_fd

    def close(self):
        if self._read_fd is not None:
            os.close(self._read_fd)
            self._read_fd = None
        if self._write_fd is not None:
            os.close(self._write_fd)
            self._write_fd = None
            try:
                os.unlink(self.write_path)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def _write_all(fd, view):
    while len(view):
        written = os.write(fd, view)
        view = view[written:]


def storage_atom(read_bytes, write_bytes, block_bytes=util.MiB, scratch=None):
    """Read and then write bytes in blocks.

    Args:
        read_bytes: Bytes to read from the seed file, wrapping around.
        write_bytes: Bytes to write to the scratch file.
        block_bytes: Size of one read or write operation.
        scratch: The ScratchSpace to use (default a temporary one).
    Returns:
        An AtomReport; operations counts read and write calls.
    Raises:
        AtomError: if a read or write fails, e.g. on a full disk.
    """
    own_scratch = scratch is None
    scratch = scratch or ScratchSpace()
    started = time.monotonic()
    operations = 0
    read = 0
    written = 0
    try:
        if read_bytes:
            fd = scratch.read_fd()
            for size in block_sizes(read_bytes, block_bytes):
                while size:
                    data = os.pread(fd, size, scratch.read_offset)
                    if not data:
                        scratch.read_offset = 0
                        continue
                    operations += 1
                    read += len(data)
                    size -= len(data)
                    scratch.read_offset += len(data)
        if write_bytes:
            fd = scratch.write_fd()
            buf = memoryview(bytearray(b'\xa5' * min(block_bytes,
                                                     write_bytes)))
            for size in block_sizes(write_bytes, block_bytes):
                if scratch.write_offset + size > WRITE_WRAP_BYTES:
                    os.lseek(fd, 0, os.SEEK_SET)
                    scratch.write_offset = 0
                _write_all(fd, buf[:size])
                operations += 1
                written += size
                scratch.write_offset += size
    except (IOError, OSError) as err:
        if err.errno == errno.ENOSPC:
            reason = 'scratch disk full after %d bytes' % written
        else:
            reason = str(err)
        raise AtomError(ResourceKind.STORAGE, reason)
    finally:
        if own_scratch:
            scratch.close()
    return AtomReport(ResourceKind.STORAGE, started, time.monotonic(),
                      operations=operations, bytes_read=read,
                      bytes_written=written)


def network_atom(*args, **kwargs):
    """Network consumption is not emulated."""
    raise NotImplementedError('Network consumption is not emulated')


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog='python -m pyworkload.atoms',
        description='Run the compute kernel a number of times.')
    parser.add_argument('--iterations', type=int, required=True)
    parser.add_argument('--size', type=int, default=KERNEL_SIZE)
    args = parser.parse_args(argv)
    ComputeKernel(args.size).run(args.iterations)
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
