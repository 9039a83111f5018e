"""In-process content-addressed object store.

Objects are immutable byte strings addressed by the SHA-256 hex digest of
their content. Every object carries a pin flag: ``gc()`` removes unpinned
objects only. An optional directory persistence format mirrors the in-memory
state (``objects/<first 2 hex chars>/<full hex>`` plus ``pins.json``).
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path

ContentHash = str  # 64-char lowercase hex SHA-256 digest


class StoreError(Exception):
    pass


class EmptyPayload(StoreError):
    pass


class NotFound(StoreError):
    pass


class DigestMismatch(StoreError):
    pass


def content_hash(data: bytes) -> ContentHash:
    return hashlib.sha256(data).hexdigest()


@dataclass
class StoredObject:
    data: bytes
    pinned: bool
    put_seq: int


class ContentStore:
    """Keyed blob store with pinning and garbage collection.

    Concurrent reads are fine; mutations are serialized by an internal lock.
    """

    def __init__(self) -> None:
        self._objects: dict[ContentHash, StoredObject] = {}
        self._lock = threading.Lock()
        self._put_counter = 0

    def __len__(self) -> int:
        return len(self._objects)

    def __contains__(self, digest: ContentHash) -> bool:
        return digest in self._objects

    def put(self, data: bytes) -> ContentHash:
        """Store bytes, pin them, and return their digest (idempotent)."""
        if not data:
            raise EmptyPayload("refusing to store an empty payload")
        digest = content_hash(data)
        with self._lock:
            obj = self._objects.get(digest)
            if obj is None:
                self._objects[digest] = StoredObject(data, True, self._put_counter)
                self._put_counter += 1
            else:
                obj.pinned = True
        return digest

    def get(self, digest: ContentHash) -> bytes:
        with self._lock:
            obj = self._objects.get(digest)
        if obj is None:
            raise NotFound(f"no object {digest}")
        return obj.data

    def pinned(self, digest: ContentHash) -> bool:
        with self._lock:
            obj = self._objects.get(digest)
        if obj is None:
            raise NotFound(f"no object {digest}")
        return obj.pinned

    def unpin(self, digest: ContentHash) -> None:
        """Mark an object collectable. Unpinning twice is a no-op."""
        with self._lock:
            obj = self._objects.get(digest)
            if obj is None:
                raise NotFound(f"no object {digest}")
            obj.pinned = False

    def gc(self) -> int:
        """Drop every unpinned object; returns the number removed."""
        with self._lock:
            doomed = [h for h, o in self._objects.items() if not o.pinned]
            for h in doomed:
                del self._objects[h]
        return len(doomed)

    def hashes(self) -> list[ContentHash]:
        with self._lock:
            return sorted(self._objects)

    def save_dir(self, root: str | Path) -> None:
        """Persist to ``objects/<h[:2]>/<h>`` files plus ``pins.json``."""
        root = Path(root)
        objdir = root / "objects"
        objdir.mkdir(parents=True, exist_ok=True)
        with self._lock:
            snapshot = {h: (o.data, o.pinned) for h, o in self._objects.items()}
        pins = []
        for digest, (data, pinned) in sorted(snapshot.items()):
            sub = objdir / digest[:2]
            sub.mkdir(exist_ok=True)
            (sub / digest).write_bytes(data)
            if pinned:
                pins.append(digest)
        (root / "pins.json").write_text(json.dumps(pins))

    @classmethod
    def load_dir(cls, root: str | Path) -> "ContentStore":
        """Load a persisted store, re-verifying every digest."""
        root = Path(root)
        pins = set(json.loads((root / "pins.json").read_text()))
        store = cls()
        objdir = root / "objects"
        for path in sorted(objdir.glob("??/*")):
            data = path.read_bytes()
            digest = path.name
            if content_hash(data) != digest:
                raise DigestMismatch(f"object {digest} fails digest re-verification")
            store.put(data)
            if digest not in pins:
                store.unpin(digest)
        return store
