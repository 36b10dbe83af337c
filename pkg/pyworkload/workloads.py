"""Reference workloads to profile and emulate.

Each workload is an ordinary program with a tunable iteration count, so
that the profiler treats it as a black box:

    python -m pyworkload.workloads compute --iterations 100000
    python -m pyworkload.workloads write --iterations 10000
    python -m pyworkload.workloads mixed --iterations 1000000

One iteration of the compute workload takes a few microseconds, so the
iteration counts 10^4 to 10^7 cover runtimes from a fraction of a second
to minutes.
"""

import argparse
import os
import sys
import tempfile
import numpy
from pyworkload import util


WORKLOADS = ('compute', 'write', 'mixed')
KERNEL_SIZE = 32
WRITE_BLOCK_BYTES = 4096
WRAP_BYTES = 64 * util.MiB
# The mixed workload alternates phases of this many iterations.
PHASE_ITERATIONS = 1000
MIXED_HOLD_BYTES = 32 * util.MiB


class Error(Exception):
    """Base exception class for this module."""


def command(name, iterations, scratch_dir=None):
    """Return the argument list running a reference workload."""
    if name not in WORKLOADS:
        raise Error('Unknown workload %r, expected one of %s' %
                    (name, ', '.join(WORKLOADS)))
    args = [sys.executable, '-m', 'pyworkload.workloads', name,
            '--iterations', str(iterations)]
    if scratch_dir:
        args += ['--scratch', scratch_dir]
    return args


def compute(iterations):
    """Multiply small matrices iterations times."""
    rng = numpy.random.RandomState(0)
    a = rng.random_sample((KERNEL_SIZE, KERNEL_SIZE))
    b = rng.random_sample((KERNEL_SIZE, KERNEL_SIZE))
    c = numpy.empty_like(a)
    for _ in range(iterations):
        numpy.dot(a, b, out=c)
    return float(c[0, 0])


class _ScratchFile(object):

    def __init__(self, scratch_dir):
        self.fd, self.path = tempfile.mkstemp(prefix='pyworkload-ref-',
                                              dir=scratch_dir)
        self.offset = 0

    def write(self, data):
        if self.offset + len(data) > WRAP_BYTES:
            os.lseek(self.fd, 0, os.SEEK_SET)
            self.offset = 0
        view = memoryview(data)
        while len(view):
            view = view[os.write(self.fd, view):]
        self.offset += len(data)

    def close(self):
        os.close(self.fd)
        os.unlink(self.path)


def write(iterations, scratch_dir=None):
    """Write one block per iteration to a scratch file."""
    block = os.urandom(WRITE_BLOCK_BYTES)
    scratch = _ScratchFile(scratch_dir)
    try:
        for _ in range(iterations):
            scratch.write(block)
    finally:
        scratch.close()


def mixed(iterations, scratch_dir=None):
    """Alternate compute phases with write and memory phases.

    Even phases compute; odd phases write a block per iteration and grow
    a memory buffer, which is released at the end of the phase.
    """
    rng = numpy.random.RandomState(0)
    a = rng.random_sample((KERNEL_SIZE, KERNEL_SIZE))
    c = numpy.empty_like(a)
    block = os.urandom(WRITE_BLOCK_BYTES)
    scratch = _ScratchFile(scratch_dir)
    grow = max(1, MIXED_HOLD_BYTES // PHASE_ITERATIONS)
    held = []
    try:
        for i in range(iterations):
            phase, step = divmod(i, PHASE_ITERATIONS)
            if phase % 2 == 0:
                numpy.dot(a, a, out=c)
                continue
            scratch.write(block)
            buf = numpy.empty(grow, dtype=numpy.uint8)
            buf.fill(1)
            held.append(buf)
            if step == PHASE_ITERATIONS - 1:
                del held[:]
    finally:
        scratch.close()


def main(argv=None):
    parser = argparse.ArgumentParser(prog='python -m pyworkload.workloads',
                                     description=__doc__.split('\n')[0])
    parser.add_argument('workload', choices=WORKLOADS)
    parser.add_argument('--iterations', type=int, required=True)
    parser.add_argument('--scratch', default=None,
                        help='directory of scratch files')
    args = parser.parse_args(argv)
    if args.iterations < 0:
        parser.error('--iterations must be >= 0')
    if args.workload == 'compute':
        compute(args.iterations)
    elif args.workload == 'write':
        write(args.iterations, args.scratch)
    else:
        mixed(args.iterations, args.scratch)
    return 0


if __name__ == '__main__':
    sys.exit(main())
