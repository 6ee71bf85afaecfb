import hashlib


def derive_seed(seed, *stage):
    """Derive a 63-bit child seed from a root seed and a stage path.

    ``derive_seed(1, "phantom")`` and ``derive_seed(1, "fold", 2)`` are
    independent streams; the mapping is stable across processes and
    platforms (sha256 of the joined string).
    """
    key = ":".join([str(int(seed))] + [str(s) for s in stage])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
