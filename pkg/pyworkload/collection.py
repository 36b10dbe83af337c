"""Query results of the profile stores."""

from pyworkload import model


class ProfileCollection(list):
    """
    The repeats of one profile key.

    The collection remembers the ProfileKey it was loaded by; two
    collections are equal when their keys and their profiles are.
    """

    def __init__(self, profiles=(), key=None):
        super(ProfileCollection, self).__init__(profiles)
        self.key = key

    def copy(self):
        """Override list.copy so that the key is kept."""
        return type(self)(list(self), key=self.key)

    def ordered(self):
        """Return a copy ordered by creation time."""
        return type(self)(sorted(self, key=lambda p: p.created_at),
                          key=self.key)

    def latest(self):
        """Return the most recently created profile, or None."""
        if not self:
            return None
        return max(self, key=lambda p: p.created_at)

    def created_at(self, timestamp):
        """Return the profile created at the given datetime, or None."""
        for profile in self:
            if profile.created_at == timestamp:
                return profile
        return None

    def ttc(self):
        """Return the times to completion of all repeats."""
        return [profile.ttc_s for profile in self]

    def stats(self):
        """Return the ProfileStats over all repeats."""
        return model.aggregate_stats(self)

    def __eq__(self, other):
        same_list = super(ProfileCollection, self).__eq__(other)
        if isinstance(other, ProfileCollection):
            return same_list and self.key == other.key
        if isinstance(other, list):
            return same_list
        return False

    def __ne__(self, other):
        return not self == other

    __hash__ = None
