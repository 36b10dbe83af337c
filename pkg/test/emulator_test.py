"""Tests for emulation plans and the emulator."""

import datetime
import os
import random
import shutil
import tempfile
import time
import unittest
import psutil
from dateutil import tz
from pyworkload import atoms
from pyworkload import config
from pyworkload import emulator
from pyworkload import model
from pyworkload import store
from pyworkload import util
from pyworkload.model import (CpuSample, IoSample, MemSample, ResourceKind,
                              Sample)
from pyworkload.testing import synthetic


SYSTEM = synthetic.DEFAULT_SYSTEM
CALIBRATION = atoms.Calibration(100000.0)


def make_profile(series, command='app', tags=()):
    runtime = max(s.timestamp_s for samples in series.values()
                  for s in samples) if series else 1.0
    return model.Profile(command, tags, SYSTEM, series,
                         model.integrate_totals(series, runtime),
                         sample_rate_hz=1.0, spawn_offset_s=0.0,
                         created_at=datetime.datetime(2024, 1, 1,
                                                      tzinfo=tz.tzutc()))


def two_sample_profile():
    return make_profile({
        ResourceKind.COMPUTE: [
            Sample(0, 1.0, 'compute', CpuSample(
                instructions=1000000, cycles_used=60,
                cycles_stalled_frontend=20, cycles_stalled_backend=20)),
            Sample(1, 2.0, 'compute', CpuSample())],
        ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample()),
            Sample(1, 2.0, 'storage', IoSample(0, 4096))],
        ResourceKind.MEMORY: [
            Sample(0, 1.0, 'memory', MemSample(4096, 4096, 4096, 0)),
            Sample(1, 2.0, 'memory', MemSample(4096, 0, 0, 4096))],
    })


class PlanTest(unittest.TestCase):

    def test_two_sample_plan(self):
        plan = emulator.plan_from_profile(two_sample_profile())
        self.assertEqual(2, len(plan))
        self.assertEqual(4, plan.task_count())
        first, second = plan.groups
        self.assertEqual(set([ResourceKind.COMPUTE, ResourceKind.MEMORY]),
                         set(task.kind for task in first.tasks))
        self.assertEqual(set([ResourceKind.STORAGE, ResourceKind.MEMORY]),
                         set(task.kind for task in second.tasks))
        compute = [t for t in first.tasks
                   if t.kind == ResourceKind.COMPUTE][0]
        self.assertAlmostEqual(0.6, compute.efficiency)
        self.assertEqual('app', plan.command)

    def test_plan_totals_match_the_profile(self):
        profile = two_sample_profile()
        totals = emulator.plan_from_profile(profile).totals()
        for name in model.EMULATED_METRICS:
            self.assertEqual(getattr(profile.totals, name), totals[name])

    def test_efficiency_override(self):
        plan = emulator.plan_from_profile(two_sample_profile(),
                                          efficiency=0.3)
        self.assertEqual(0.3, plan.groups[0].tasks[0].efficiency)

    def test_estimated_counters_run_at_full_efficiency(self):
        profile = make_profile({ResourceKind.COMPUTE: [
            Sample(0, 1.0, 'compute', CpuSample(instructions=10,
                                                cycles_used=10))]})
        plan = emulator.plan_from_profile(profile)
        self.assertEqual(1.0, plan.groups[0].tasks[0].efficiency)

    def test_idle_periods_keep_their_group(self):
        profile = make_profile({ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample(0, 10)),
            Sample(1, 2.0, 'storage', IoSample()),
            Sample(2, 3.0, 'storage', IoSample(0, 10))]})
        plan = emulator.plan_from_profile(profile)
        self.assertEqual([0, 1, 2], [g.index for g in plan])
        self.assertEqual((), plan.groups[1].tasks)

    def test_block_size(self):
        plan = emulator.plan_from_profile(two_sample_profile(),
                                          block_bytes=4096)
        self.assertEqual(4096, plan.block_bytes)
        self.assertTrue(all(t.block_bytes == 4096 for g in plan
                            for t in g.tasks
                            if t.kind != ResourceKind.COMPUTE))

    def test_empty_profile(self):
        self.assertRaises(emulator.EmptyPlan, emulator.plan_from_profile,
                          make_profile({}))
        idle = make_profile({ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample())]})
        self.assertRaises(emulator.EmptyPlan, emulator.plan_from_profile,
                          idle)

    def test_groups_hold_one_task_per_kind(self):
        self.assertRaises(model.InvalidArgument, emulator.SampleGroup, 0,
                          [atoms.AtomTask.storage(1),
                           atoms.AtomTask.storage(2)])

    def test_groups_are_ordered(self):
        self.assertRaises(model.InvalidArgument, emulator.EmulationPlan,
                          [emulator.SampleGroup(1), emulator.SampleGroup(0)])


class EmulatorTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.config = config.EmulatorConfig(block_bytes=util.MiB,
                                            scratch_dir=self.dir,
                                            seed_bytes=util.MiB)
        self.emulator = emulator.Emulator(self.config, CALIBRATION)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_emulate_two_sample_plan(self):
        plan = emulator.plan_from_profile(two_sample_profile())
        report = self.emulator.emulate(plan)
        self.assertTrue(report.complete)
        self.assertEqual(2, len(report.groups))
        self.assertEqual(plan.totals(), report.consumed)
        self.assertEqual(0.0, report.deviations()['bytes_written'])
        report.check_barriers()
        self.assertEqual({}, report.measured)
        self.assertGreater(report.ttc_s, 0)
        # No reads were planned and the write file is removed.
        self.assertEqual([], os.listdir(self.dir))

    def test_empty_plan(self):
        self.assertRaises(emulator.EmptyPlan, self.emulator.emulate,
                          emulator.EmulationPlan([]))

    def test_one_sample_plan_starts_quickly(self):
        profile = make_profile({ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample(0, 4096))]})
        started = time.monotonic()
        self.emulator.emulate(emulator.plan_from_profile(profile))
        self.assertLess(time.monotonic() - started, 2.0)

    def test_barriers_hold_for_random_plans(self):
        rng = random.Random(42)
        for case in range(100):
            groups = []
            for index in range(rng.randint(1, 4)):
                tasks = []
                if rng.random() < 0.7:
                    tasks.append(atoms.AtomTask.compute(
                        rng.randint(0, 3) * 100000,
                        rng.choice([1.0, 0.5])))
                if rng.random() < 0.5:
                    blocks = rng.randint(0, 4)
                    tasks.append(atoms.AtomTask.memory(
                        blocks * 65536, rng.randint(0, blocks) * 65536,
                        65536))
                if rng.random() < 0.5:
                    tasks.append(atoms.AtomTask.storage(
                        rng.randint(0, 2) * 65536, rng.randint(0, 4) * 65536,
                        65536))
                groups.append(emulator.SampleGroup(index, tasks))
            plan = emulator.EmulationPlan(groups, block_bytes=65536)
            report = self.emulator.emulate(plan)
            self.assertEqual(len(groups), len(report.groups), case)
            report.check_barriers()
            for previous, group in zip(report.groups, report.groups[1:]):
                ends = [a.ended_s for a in previous.atoms]
                starts = [a.started_s for a in group.atoms]
                if ends and starts:
                    self.assertLessEqual(max(ends), min(starts), case)
            self.assertEqual(plan.totals(), report.consumed, case)

    def test_write_self_check(self):
        profile = make_profile({ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample(0, 64 * util.MiB))]})
        report = self.emulator.emulate(emulator.plan_from_profile(profile))
        self.assertEqual(64 * util.MiB, report.consumed['bytes_written'])
        self.assertEqual(64, report.groups[0].atoms[0].operations)

    def test_atom_failure_reports_partial_run(self):
        scratch = os.path.join(self.dir, 'missing')
        failing = emulator.Emulator(
            config.EmulatorConfig(scratch_dir=scratch), CALIBRATION)
        plan = emulator.EmulationPlan([
            emulator.SampleGroup(0, [atoms.AtomTask.memory(4096)]),
            emulator.SampleGroup(1, [atoms.AtomTask.storage(0, 4096),
                                     atoms.AtomTask.memory(4096)]),
            emulator.SampleGroup(2, [atoms.AtomTask.memory(4096)])])
        with self.assertRaises(emulator.AtomFailure) as ctx:
            failing.emulate(plan)
        err = ctx.exception
        self.assertEqual(1, err.group)
        self.assertEqual(ResourceKind.STORAGE, err.atom)
        self.assertIsInstance(err.reason, atoms.AtomError)
        self.assertFalse(err.report.complete)
        self.assertEqual(2, len(err.report.groups))
        self.assertEqual(8192, err.report.consumed['allocated_bytes'])

    def test_report_serialization(self):
        plan = emulator.plan_from_profile(two_sample_profile())
        data = self.emulator.emulate(plan).to_dict()
        self.assertEqual('app', data['command'])
        self.assertEqual(2, len(data['groups']))
        self.assertEqual(100000.0,
                         data['calibration']['instructions_per_iteration'])

    def test_report_as_profile(self):
        plan = emulator.plan_from_profile(two_sample_profile())
        report = self.emulator.emulate(plan)
        record = report.as_profile(SYSTEM, ['x'])
        self.assertEqual(store.emulation_key(store.ProfileKey('app', ['x'])),
                         store.ProfileKey.of(record))
        self.assertEqual(report.ttc_s, record.ttc_s)
        record.check()

    def test_self_measurement(self):
        backend = synthetic.SyntheticBackend(
            synthetic.ScriptedTrajectory.linear(1.0, bytes_written=10))
        measuring = emulator.Emulator(self.config, CALIBRATION, backend)
        profile = make_profile({ResourceKind.STORAGE: [
            Sample(0, 1.0, 'storage', IoSample(0, 4096))]})
        report = measuring.emulate(emulator.plan_from_profile(profile))
        self.assertIn('bytes_written', report.measured)
        self.assertIn('peak_bytes', report.measured)

    def test_overlapping_groups_are_detected(self):
        report = emulator.EmulationReport(1.0, [
            emulator.GroupRecord(0, 0.0, 2.0, ()),
            emulator.GroupRecord(1, 1.0, 3.0, ())], {}, {})
        self.assertRaises(emulator.Error, report.check_barriers)


class ReleaseRecorder(object):

    def __init__(self):
        self.released = 0

    def __call__(self):
        return self

    def release(self):
        self.released += 1


class EmulateCommandTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.config = config.EmulatorConfig(scratch_dir=self.dir,
                                            seed_bytes=util.MiB)
        self.store = store.FileStore(os.path.join(self.dir, 'profiles'))
        self.profile = two_sample_profile()
        self.store.save(self.profile)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def emulate(self, command='app', **kwargs):
        kwargs.setdefault('source', self.store)
        return emulator.emulate_command(command, config=self.config,
                                        calibration=CALIBRATION, **kwargs)

    def test_stored_profile_is_emulated(self):
        report = self.emulate()
        self.assertEqual(self.profile, report.profile)
        self.assertEqual(report.planned, report.consumed)
        self.assertIsNone(report.recorded_id)
        self.assertEqual([], list(self.store.load(
            store.emulation_key(store.ProfileKey('app')))))

    def test_locator_source(self):
        report = self.emulate(source=self.store.path)
        self.assertEqual(self.profile, report.profile)

    def test_record(self):
        report = self.emulate(record=True)
        runs = self.store.load(store.emulation_key(store.ProfileKey('app')))
        self.assertEqual(1, len(runs))
        self.assertIsNotNone(report.recorded_id)
        self.assertEqual(report.ttc_s, runs[0].ttc_s)

    def test_missing_profile(self):
        load = ReleaseRecorder()
        self.assertRaises(store.ProfileNotFound, self.emulate, 'other',
                          load=load)
        self.assertRaises(store.ProfileNotFound, self.emulate,
                          tags=['large'])
        self.assertEqual(0, load.released)

    def test_load_is_released(self):
        load = ReleaseRecorder()
        self.emulate(load=load)
        self.assertEqual(1, load.released)

    def test_load_is_released_after_atom_failure(self):
        load = ReleaseRecorder()
        failing = config.EmulatorConfig(
            scratch_dir=os.path.join(self.dir, 'missing'))
        with self.assertRaises(emulator.AtomFailure) as ctx:
            emulator.emulate_command('app', source=self.store,
                                     config=failing, calibration=CALIBRATION,
                                     load=load)
        self.assertEqual(1, load.released)
        self.assertEqual(self.profile, ctx.exception.report.profile)


class CalibrationTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.config = config.EmulatorConfig(
            calibration_path=os.path.join(self.dir, 'calibration.json'))

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_cached_calibration_is_used(self):
        key = util.content_hash(SYSTEM.cpu_model, SYSTEM.core_count,
                                SYSTEM.max_freq_hz, True)
        with open(self.config.calibration_path, 'w') as stream:
            stream.write(util.to_json({key: {
                'instructions_per_iteration': 5000.0,
                'efficiency_ceiling': 0.8, 'estimated': False}}))
        calibration = emulator.load_calibration(self.config, SYSTEM)
        self.assertEqual(atoms.Calibration(5000.0, 0.8), calibration)

    def test_failed_measurement_falls_back(self):
        backend = synthetic.SyntheticBackend(
            synthetic.ScriptedTrajectory.linear(0.1, instructions=0),
            spawn_error=OSError(2, 'No such file or directory'))
        self.assertIs(atoms.STATIC_CALIBRATION,
                      emulator.calibrate(backend=backend))

    def test_difference_of_two_runs(self):
        # Both runs report the same scripted counters, so the difference
        # holds no instructions.
        backend = synthetic.SyntheticBackend(
            synthetic.ScriptedTrajectory.linear(0.1, instructions=5000))
        self.assertIs(atoms.STATIC_CALIBRATION,
                      emulator.calibrate(backend=backend))


class BackgroundLoadTest(unittest.TestCase):

    def test_no_load(self):
        with emulator.background_load() as handle:
            self.assertEqual([], handle.pids)
            self.assertFalse(handle.active)
            handle.hold(10)

    def test_negative_load(self):
        self.assertRaises(emulator.LoadError, emulator.background_load,
                          cpu_fraction=-1)

    def test_memory_load_is_resident(self):
        size = 64 * util.MiB
        with emulator.background_load(mem_bytes=size) as handle:
            self.assertTrue(handle.active)
            rss = psutil.Process(handle.memory_pid).memory_info().rss
            self.assertGreaterEqual(rss, size)
        self.assertFalse(handle.active)

    def test_disk_and_cpu_load(self):
        tmp = tempfile.mkdtemp()
        try:
            with emulator.background_load(cpu_fraction=0.5, disk_mbps=10,
                                          scratch_dir=tmp) as handle:
                self.assertEqual(2, len(handle.pids))
                handle.hold(1.0)
            self.assertGreater(handle.bytes_written, 4 * 10 ** 6)
            self.assertLess(handle.bytes_written, 16 * 10 ** 6)
            self.assertEqual([], os.listdir(tmp))
        finally:
            shutil.rmtree(tmp)


if __name__ == '__main__':
    unittest.main()
