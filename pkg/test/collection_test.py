import datetime
import unittest
from dateutil import tz
from pyworkload import model
from pyworkload.collection import ProfileCollection
from pyworkload.testing import synthetic


class ProfileCollectionTest(unittest.TestCase):

    def setUp(self):
        self.times = [datetime.datetime(2024, 1, day, tzinfo=tz.tzutc())
                      for day in (3, 1, 2)]
        self.profiles = [
            synthetic.scripted_profile(
                synthetic.ScriptedTrajectory.linear(
                    duration, bytes_written=1000),
                command='app', created_at=t)
            for t, duration in zip(self.times, (2.0, 1.0, 3.0))]
        self.collection = ProfileCollection(self.profiles, key='app')

    def test_collection_is_list(self):
        self.assertIsInstance(self.collection, list,
                              "ProfileCollection isn't a list instance")
        self.assertEqual(self.collection, self.profiles)
        self.assertNotEqual(self.collection, tuple(self.profiles))

    def test_copy_keeps_type_and_key(self):
        a = self.collection.copy()
        self.assertIsNot(self.collection, a)
        self.assertIsInstance(a, ProfileCollection)
        self.assertEqual(self.collection, a)
        self.assertEqual('app', a.key)

    def test_key_takes_part_in_equality(self):
        self.assertNotEqual(ProfileCollection(self.profiles, key='a'),
                            ProfileCollection(self.profiles, key='b'))

    def test_ordered(self):
        ordered = self.collection.ordered()
        self.assertEqual([1, 2, 3], [p.created_at.day for p in ordered])
        self.assertEqual('app', ordered.key)
        self.assertEqual(3, self.collection[0].created_at.day)

    def test_latest(self):
        self.assertIs(self.profiles[0], self.collection.latest())
        self.assertIsNone(ProfileCollection().latest())

    def test_created_at(self):
        self.assertIs(self.profiles[2],
                      self.collection.created_at(self.times[2]))
        self.assertIsNone(self.collection.created_at(
            datetime.datetime(2020, 1, 1, tzinfo=tz.tzutc())))

    def test_ttc(self):
        self.assertEqual([2.0, 1.0, 3.0], self.collection.ttc())

    def test_stats(self):
        stats = self.collection.stats()
        self.assertEqual(3, stats.n)
        self.assertEqual((1000.0, 0.0), stats.metric('bytes_written'))

    def test_stats_of_empty_collection(self):
        self.assertRaises(model.InvalidArgument,
                          ProfileCollection().stats)


if __name__ == '__main__':
    unittest.main()
