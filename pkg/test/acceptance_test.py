"""Long running experiments against the real host.

These run the reference workloads under the OS backend and take several
minutes each. They are skipped unless PYWORKLOAD_ACCEPTANCE=1 is set.
"""

import os
import shutil
import subprocess
import sys
import tempfile
import time
import unittest
import numpy
from pyworkload import config
from pyworkload import emulator
from pyworkload import sampler
from pyworkload import telemetry
from pyworkload import workloads


ENABLED = os.environ.get('PYWORKLOAD_ACCEPTANCE') == '1'
RATES = (0.1, 1.0, 10.0)


def run_plain(args):
    started = time.monotonic()
    subprocess.check_call(args)
    return time.monotonic() - started


def iterations_for(name, seconds, scratch_dir=None, trial=20000):
    """Scale a workload's iteration count to an approximate runtime."""
    elapsed = run_plain(workloads.command(name, trial, scratch_dir))
    startup = run_plain(workloads.command(name, 0, scratch_dir))
    per_iteration = max(elapsed - startup, 1e-3) / trial
    return max(1, int(seconds / per_iteration))


@unittest.skipUnless(ENABLED, 'set PYWORKLOAD_ACCEPTANCE=1 to run')
@unittest.skipUnless(sys.platform.startswith('linux'), 'needs Linux')
class AcceptanceTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.backend = telemetry.default_backend()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def profile(self, args, rate=1.0):
        profiler = sampler.Profiler(self.backend,
                                    config.ProfilerConfig(rate))
        profile = profiler.profile(args)
        self.assertFalse(profile.failed)
        return profile

    def emulate(self, profile, backend=None):
        emulator_config = config.EmulatorConfig(scratch_dir=self.dir)
        return emulator.Emulator(emulator_config, backend=backend).emulate(
            emulator.plan_from_profile(profile, emulator_config.block_bytes))

    def test_overhead(self):
        for seconds in (1, 10, 60):
            args = workloads.command(
                'compute', iterations_for('compute', seconds))
            plain = run_plain(args)
            for rate in RATES:
                profiled = self.profile(args, rate).ttc_s
                self.assertLessEqual(abs(profiled - plain) / plain, 0.05,
                                     (seconds, rate, plain, profiled))

    def test_consistency(self):
        args = workloads.command('compute', iterations_for('compute', 10))
        for rate in RATES:
            totals = numpy.array([self.profile(args, rate).totals.instructions
                                  for _ in range(10)], dtype=float)
            self.assertLess(totals.std() / totals.mean(), 0.05, rate)

    def test_peak_memory_stabilizes(self):
        args = workloads.command('mixed', iterations_for('mixed', 3, self.dir),
                                 self.dir)
        reference = self.profile(args, 10.0).totals.peak_bytes
        for rate in (0.2, 0.5, 1.0, 5.0):
            profile = self.profile(args, rate)
            if len(profile.samples('memory')) < 2:
                continue
            self.assertLessEqual(
                abs(profile.totals.peak_bytes - reference) / reference, 0.1,
                rate)

    def test_same_host_fidelity(self):
        for name in workloads.WORKLOADS:
            args = workloads.command(
                name, iterations_for(name, 10, self.dir), self.dir)
            profile = self.profile(args)
            report = self.emulate(profile)
            self.assertLessEqual(
                abs(report.ttc_s - profile.ttc_s) / profile.ttc_s, 0.15,
                (name, profile.ttc_s, report.ttc_s))

    def test_mixed_ordering_is_preserved(self):
        base = iterations_for('mixed', 2, self.dir)
        original, emulated = [], []
        for factor in (1, 2, 4, 8):
            profile = self.profile(workloads.command('mixed', base * factor,
                                                     self.dir))
            original.append(profile.ttc_s)
            emulated.append(self.emulate(profile).ttc_s)
        self.assertEqual(sorted(original), original)
        self.assertEqual(sorted(emulated), emulated)

    def test_emulation_reproduces_the_profile(self):
        args = workloads.command('mixed', iterations_for('mixed', 5, self.dir),
                                 self.dir)
        profile = self.profile(args)
        allowance = config.EmulatorConfig().memory_allowance_bytes
        measured = self.emulate(profile, self.backend).measured
        totals = profile.totals
        for name in ('instructions', 'bytes_written'):
            self.assertLessEqual(
                abs(measured[name] - getattr(totals, name)),
                0.1 * getattr(totals, name), name)
        self.assertLessEqual(
            abs(measured['peak_bytes'] - totals.peak_bytes),
            0.1 * totals.peak_bytes + allowance)

    def test_minimal_plan_startup(self):
        profile = self.profile(
            workloads.command('write', 1, self.dir), 1.0)
        started = time.monotonic()
        self.emulate(profile)
        self.assertLess(time.monotonic() - started, 2.0)


if __name__ == '__main__':
    unittest.main()
