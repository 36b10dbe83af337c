"""Profile a process once, emulate its resource consumption anywhere."""

__version__ = '1.0.0'
