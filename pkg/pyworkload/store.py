"""Persistent storage of profiles.

Profiles are indexed by their exact command line and their set of tags.
Saving a profile never replaces an earlier one: repeated runs of the same
command accumulate under one key, so they can be aggregated later.

Two backends exist: a directory of JSON files (one file per profile) and
a document store reached through a small adapter interface:

    adapter.put(blob, key)  -> record id
    adapter.query(key)      -> list of (record id, blob)

Document stores cap the size of a single document, so profiles with very
long series are rejected before anything is written.
"""

import collections
import errno
import glob
import logging
import os
import tempfile
import six
from pyworkload import collection
from pyworkload import formats
from pyworkload import model
from pyworkload import util


DOCUMENT_LIMIT_BYTES = 16 * util.MiB
# Serialized size of one compact storage sample, the smallest kind.
SAMPLE_BYTES = 67


class Error(Exception):
    """A general store error."""

    def __init__(self, msg=None, locator=None):
        Exception.__init__(self, msg)
        self.locator = locator


class StorageError(Error):
    """A profile could not be written or read."""

    def __init__(self, msg=None, path=None):
        Error.__init__(self, msg, path)
        self.path = path


class StoreLimitError(Error):
    """A serialized profile exceeds the document size limit."""

    def __init__(self, size=None, limit=None):
        Error.__init__(self, 'Serialized profile of %s bytes exceeds the '
                             '%s byte document limit' % (size, limit))
        self.size = size
        self.limit = limit


class CorruptProfile(Error):
    """A stored record cannot be decoded."""

    def __init__(self, record=None, reason=None):
        Error.__init__(self, 'Corrupt profile record %s: %s' %
                       (record, reason))
        self.record = record
        self.reason = reason


class ProfileNotFound(Error):
    """No profile matches a key."""

    def __init__(self, key=None):
        Error.__init__(self, 'No profile for key %s' % (key,))
        self.key = key


class ProfileKey(collections.namedtuple('ProfileKey', 'command tags')):
    """The exact command line and the sorted tags of a profile."""
    __slots__ = ()

    def __new__(cls, command, tags=()):
        if isinstance(tags, six.string_types):
            tags = [tags]
        return super(ProfileKey, cls).__new__(
            cls, util.command_line(command), tuple(sorted(set(tags or ()))))

    @classmethod
    def of(cls, profile):
        return cls(profile.command, profile.tags)

    def matches(self, profile):
        return (profile.command == self.command and
                tuple(sorted(profile.tags)) == self.tags)

    def encode(self):
        """Return the key as a canonical string for document queries."""
        return util.to_json([self.command, list(self.tags)])

    def digest(self):
        return util.content_hash(self.command, *self.tags)

    def __str__(self):
        if not self.tags:
            return repr(self.command)
        return '%r [%s]' % (self.command, ', '.join(self.tags))


class StoreLimits(collections.namedtuple('StoreLimits',
                                         'max_document_bytes')):
    """Size limits of a document store."""
    __slots__ = ()

    def __new__(cls, max_document_bytes=DOCUMENT_LIMIT_BYTES):
        return super(StoreLimits, cls).__new__(cls, max_document_bytes)

    @property
    def max_samples(self):
        """The approximate number of samples fitting into one document."""
        return self.max_document_bytes // SAMPLE_BYTES


class Store(object):
    """Base class of the profile stores."""

    format = formats.ProfileFormat

    def __init__(self, locator=None):
        self.locator = locator
        self.log = logging.getLogger('pyworkload.store')

    def save(self, profile):
        """Persist a profile.

        Args:
            profile: A Profile passing its invariants.
        Returns:
            The stored id of the new record.
        Raises:
            StorageError: if the record cannot be written.
            StoreLimitError: if the serialized profile is too large.
        """
        try:
            profile.check()
        except model.InvalidArgument as err:
            raise StorageError('Refusing to store an invalid profile: %s' %
                               err, self.locator)
        blob = self.format.encode(profile)
        stored_id = self._put(blob, ProfileKey.of(profile), profile)
        self.log.info('saved %r as %s (%d bytes)', profile, stored_id,
                      len(blob))
        return stored_id

    def load(self, key):
        """Return all profiles of a key, ordered by created_at.

        Args:
            key: A ProfileKey.
        Returns:
            A ProfileCollection, empty when nothing matches.
        Raises:
            CorruptProfile: if a matching record cannot be decoded or
                breaks the profile invariants.
        """
        profiles = []
        for record, blob in self._query(key):
            try:
                profile = self.format.decode(blob)
                profile.check()
            except (formats.Error, model.InvalidArgument) as err:
                raise CorruptProfile(record, err)
            if key.matches(profile):
                profiles.append(profile)
        self.log.debug('loaded %d profiles for %s', len(profiles), key)
        return collection.ProfileCollection(profiles, key).ordered()

    def stats_for(self, key):
        """Return the ProfileStats of all profiles of a key.

        Raises:
            ProfileNotFound: if no profile matches.
        """
        profiles = self.load(key)
        if not profiles:
            raise ProfileNotFound(key)
        return profiles.stats()

    def select(self, key, created_at=None):
        """Return one profile of a key.

        Args:
            key: A ProfileKey.
            created_at: The datetime of the wanted repeat; the most
                recent repeat is returned by default.
        Raises:
            ProfileNotFound: if no profile matches.
        """
        profiles = self.load(key)
        if created_at is None:
            profile = profiles.latest()
        else:
            profile = profiles.created_at(created_at)
        if profile is None:
            raise ProfileNotFound(key)
        return profile

    def _put(self, blob, key, profile):
        raise NotImplementedError

    def _query(self, key):
        raise NotImplementedError


class FileStore(Store):
    """Profiles as JSON files in a directory.

    Files are named <key digest>-<record digest>.json. They are written to
    a temporary name first and linked into place, so readers only ever see
    complete records and concurrent writers never replace each other.
    """

    def __init__(self, path):
        path = os.path.abspath(os.path.expanduser(path))
        super(FileStore, self).__init__(path)
        self.path = path

    def _ensure_dir(self):
        try:
            os.makedirs(self.path)
        except OSError as err:
            if err.errno != errno.EEXIST or not os.path.isdir(self.path):
                raise StorageError('Unable to create %s: %s' %
                                   (self.path, err.strerror), self.path)

    def _put(self, blob, key, profile):
        self._ensure_dir()
        stem = '%s-%s' % (key.digest(), util.content_hash(
            profile.command, ' '.join(sorted(profile.tags)),
            util.to_iso8601(profile.created_at)))
        try:
            fd, temp = tempfile.mkstemp(prefix='.', suffix='.tmp',
                                        dir=self.path)
            with os.fdopen(fd, 'wb') as stream:
                stream.write(blob)
                stream.flush()
                os.fsync(stream.fileno())
        except (IOError, OSError) as err:
            raise StorageError('Unable to write a profile to %s: %s' %
                               (self.path, err), self.path)
        try:
            suffix = 0
            while True:
                name = stem if not suffix else '%s.%d' % (stem, suffix)
                target = os.path.join(
                    self.path, '%s.%s' % (name, self.format.extension))
                try:
                    os.link(temp, target)
                    return name
                except OSError as err:
                    if err.errno != errno.EEXIST:
                        raise StorageError('Unable to store %s: %s' %
                                           (target, err.strerror), target)
                suffix += 1
        finally:
            os.unlink(temp)

    def _query(self, key):
        pattern = os.path.join(
            self.path, '%s-*.%s' % (key.digest(), self.format.extension))
        for path in sorted(glob.glob(pattern), key=_save_order):
            try:
                with open(path, 'rb') as stream:
                    blob = stream.read()
            except (IOError, OSError) as err:
                raise CorruptProfile(path, err)
            yield path, blob


def _save_order(path):
    # <stem>.<extension> is saved before <stem>.<n>.<extension>
    name = os.path.basename(path).split('.')
    suffix = int(name[1]) if len(name) > 2 and name[1].isdigit() else 0
    return name[0], suffix


class DocumentStore(Store):
    """Profiles as documents of a document database adapter."""

    def __init__(self, adapter, limits=None, locator=None):
        super(DocumentStore, self).__init__(locator)
        self.adapter = adapter
        self.limits = limits or StoreLimits()

    def _put(self, blob, key, profile):
        if len(blob) > self.limits.max_document_bytes:
            raise StoreLimitError(len(blob), self.limits.max_document_bytes)
        try:
            return self.adapter.put(blob, key.encode())
        except (IOError, OSError) as err:
            raise StorageError('Unable to store %r: %s' % (profile, err),
                               self.locator)

    def _query(self, key):
        return self.adapter.query(key.encode())


class MongoAdapter(object):
    """A document adapter backed by a MongoDB collection."""

    def __init__(self, uri, database='pyworkload', collection='profiles'):
        try:
            import pymongo
        except ImportError:
            raise ImportError('pymongo is not installed: '
                              'pip install pyworkload[mongo]')
        self._client = pymongo.MongoClient(uri)
        self._collection = self._client[database][collection]
        self._collection.create_index('key')

    def put(self, blob, key):
        result = self._collection.insert_one({'key': key, 'blob': blob})
        return str(result.inserted_id)

    def query(self, key):
        cursor = self._collection.find({'key': key}).sort('_id', 1)
        return [(str(doc['_id']), bytes(doc['blob'])) for doc in cursor]


EMULATION_PREFIX = 'emulate:'


def emulation_key(key):
    """Return the key under which emulation runs of a key are recorded."""
    return ProfileKey(EMULATION_PREFIX + key.command, key.tags)


def open_store(locator):
    """Open the store named by a locator.

    Args:
        locator: A mongodb:// URI or a directory path.
    Returns:
        A Store.
    """
    if locator.startswith(('mongodb://', 'mongodb+srv://')):
        return DocumentStore(MongoAdapter(locator), locator=locator)
    return FileStore(locator)


def save(profile, destination):
    """Persist a profile to a store or a locator."""
    return _store(destination).save(profile)


def load(key, source):
    """Return all profiles of a key from a store or a locator."""
    return _store(source).load(key)


def stats_for(key, source):
    """Return the ProfileStats of a key from a store or a locator."""
    return _store(source).stats_for(key)


def _store(store_or_locator):
    if isinstance(store_or_locator, Store):
        return store_or_locator
    return open_store(store_or_locator)
