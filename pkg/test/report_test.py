"""Tests for the CSV reports."""

import csv
import datetime
import os
import shutil
import tempfile
import unittest
from dateutil import tz
from six import StringIO
from pyworkload import model
from pyworkload import report
from pyworkload import store
from pyworkload.testing import synthetic


def make_profile(command='app', tags=(), day=1, duration_s=2.0, **totals):
    trajectory = synthetic.ScriptedTrajectory.linear(
        duration_s, **(totals or {'bytes_written': 3000,
                                  'instructions': 1000}))
    created_at = datetime.datetime(2024, 1, day, tzinfo=tz.tzutc())
    return synthetic.scripted_profile(trajectory, 1.0, command=command,
                                      tags=tags, created_at=created_at)


class ReportTest(unittest.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.store = store.FileStore(self.dir)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_label(self):
        self.assertEqual('app', report.label(store.ProfileKey('app')))
        self.assertEqual('app [a,b]',
                         report.label(store.ProfileKey('app', ['b', 'a'])))

    def test_percent_difference(self):
        self.assertAlmostEqual(10.0, report.percent_difference(1.1, 1.0))
        self.assertAlmostEqual(-50.0, report.percent_difference(1.0, 2.0))
        self.assertEqual(0.0, report.percent_difference(1.0, 0.0))

    def test_overhead(self):
        self.store.save(make_profile(tags=['plain'], duration_s=2.0))
        self.store.save(make_profile(tags=['plain'], duration_s=4.0, day=2))
        self.store.save(make_profile(tags=['profiled'], duration_s=3.3))
        rows = report.overhead_rows(self.store, [
            ('app', store.ProfileKey('app', ['plain']),
             store.ProfileKey('app', ['profiled']))])
        self.assertEqual(1, len(rows))
        row = rows[0]
        self.assertEqual(2, row['plain_n'])
        self.assertAlmostEqual(3.0, row['plain_ttc_s'])
        self.assertAlmostEqual(1.0, row['plain_ttc_std'])
        self.assertAlmostEqual(10.0, row['overhead_pct'])

    def test_overhead_needs_both_configurations(self):
        self.store.save(make_profile(tags=['plain']))
        self.assertRaises(store.ProfileNotFound, report.overhead_rows,
                          self.store,
                          [('app', store.ProfileKey('app', ['plain']),
                            store.ProfileKey('app', ['profiled']))])

    def test_consistency_of_one_run(self):
        self.store.save(make_profile())
        rows = report.consistency_rows(self.store, [store.ProfileKey('app')])
        self.assertEqual(1, len(rows))
        row = rows[0]
        self.assertEqual(1, row['n'])
        self.assertEqual(1.0, row['sample_rate_hz'])
        self.assertEqual(3000.0, row['bytes_written_mean'])
        self.assertEqual(0.0, row['bytes_written_std'])
        self.assertEqual(0.0, row['instructions_cv'])

    def test_consistency_of_repeats(self):
        self.store.save(make_profile(instructions=1000000000, day=1))
        self.store.save(make_profile(instructions=1200000000, day=2))
        row = report.consistency_rows(self.store,
                                      [store.ProfileKey('app')])[0]
        self.assertAlmostEqual(1e8 / 1.1e9, row['instructions_cv'])

    def test_fidelity(self):
        original = make_profile(duration_s=2.0)
        self.store.save(original)
        emulated = model.Profile(
            store.EMULATION_PREFIX + 'app', (), original.system, {},
            model.Totals(2.5), 1.0, 0.0, original.created_at)
        self.store.save(emulated)
        row = report.fidelity_rows(self.store, [store.ProfileKey('app')])[0]
        self.assertEqual(1, row['emulated_n'])
        self.assertAlmostEqual(2.0, row['original_ttc_s'])
        self.assertAlmostEqual(2.5, row['emulated_ttc_s'])
        self.assertAlmostEqual(25.0, row['difference_pct'])

    def test_profile_rows_sum_to_the_totals(self):
        profile = make_profile(duration_s=3.0, bytes_written=3000,
                               bytes_read=700, instructions=123457,
                               cycles_used=1000, allocated_bytes=4096)
        rows = report.profile_rows(profile, fp_fraction=0.5)
        self.assertEqual(profile.merged_indices(),
                         [row['index'] for row in rows])
        for name in ('bytes_written', 'bytes_read', 'instructions',
                     'cycles_used', 'allocated_bytes'):
            self.assertEqual(getattr(profile.totals, name),
                             sum(row[name] for row in rows), name)
        # flops are rounded per sample
        self.assertAlmostEqual(123457 * 0.5,
                               sum(row['flops'] for row in rows),
                               delta=len(rows))

    def test_profile_rows_leave_missing_kinds_empty(self):
        profile = make_profile(bytes_written=10)
        buf = StringIO()
        report.write_csv(report.profile_rows(profile),
                         report.PROFILE_COLUMNS, buf)
        parsed = list(csv.DictReader(StringIO(buf.getvalue())))
        self.assertEqual(len(profile.merged_indices()), len(parsed))
        self.assertEqual('', parsed[0]['instructions'])
        self.assertEqual('False', parsed[0]['gap'])

    def test_write_csv(self):
        buf = StringIO()
        report.write_csv([{'a': 1, 'b': 2.5, 'ignored': 3}, {'a': 2}],
                         ('a', 'b'), buf)
        self.assertEqual('a,b\n1,2.5\n2,\n', buf.getvalue())

    def test_plot_svg(self):
        try:
            import matplotlib
        except ImportError:
            self.skipTest('matplotlib is not installed')
        path = os.path.join(self.dir, 'chart.svg')
        rows = [{'configuration': 'a', 'x': 1.0, 'y': 2.0},
                {'configuration': 'b', 'x': 1.5, 'y': None}]
        report.plot_svg(rows, 'configuration', ('x', 'y'), path, 'ttc')
        with open(path) as stream:
            self.assertIn('<svg', stream.read())


if __name__ == '__main__':
    unittest.main()
