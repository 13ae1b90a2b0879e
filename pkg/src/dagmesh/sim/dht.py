"""Replicated key-value store spread across the online peers.

Keys map onto a hash ring; a value is held by the first `replication`
distinct online peers clockwise from the key's position. When a peer
leaves, values it held are re-replicated from surviving holders onto the
next peers along the ring. A value whose holders all leave before that
happens is lost for good, and the caller has to treat that as fatal for
recovery purposes.
"""

from __future__ import annotations

import hashlib

from ..errors import SimulationError


def ring_position(text: str) -> int:
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class DhtStore:
    def __init__(self, replication: int = 2):
        if replication < 1:
            raise SimulationError("replication factor must be at least 1")
        self.replication = replication
        self._online: dict[str, int] = {}        # peer -> ring position
        self._values: dict[str, bytes] = {}
        self._holders: dict[str, set[str]] = {}  # key -> peers holding it

    # ------------------------------------------------------------- membership

    def online_peers(self) -> tuple[str, ...]:
        return tuple(sorted(self._online))

    def is_online(self, peer: str) -> bool:
        return peer in self._online

    def join(self, peer: str) -> None:
        peer = str(peer)
        if peer in self._online:
            raise SimulationError(f"peer {peer!r} joined twice")
        self._online[peer] = ring_position(peer)

    def leave(self, peer: str) -> list[str]:
        """Remove a peer; re-replicate what it held. Returns lost keys."""
        peer = str(peer)
        if peer not in self._online:
            raise SimulationError(f"peer {peer!r} left but was not online")
        del self._online[peer]
        lost = []
        for key in sorted(k for k, h in self._holders.items() if peer in h):
            holders = self._holders[key]
            holders.discard(peer)
            if not holders:
                lost.append(key)
                del self._holders[key]
                del self._values[key]
                continue
            self._replenish(key)
        return lost

    # ------------------------------------------------------------------- data

    def _ring_walk(self, key: str):
        """Online peers in clockwise order starting at the key's position."""
        if not self._online:
            return
        start = ring_position(key)
        ordered = sorted(self._online.items(), key=lambda kv: (kv[1], kv[0]))
        after = [p for p, pos in ordered if pos >= start]
        before = [p for p, pos in ordered if pos < start]
        yield from after
        yield from before

    def _replenish(self, key: str) -> None:
        holders = self._holders[key]
        for peer in self._ring_walk(key):
            if len(holders) >= min(self.replication, len(self._online)):
                break
            holders.add(peer)

    def put(self, key: str, value: bytes) -> tuple[str, ...]:
        if not self._online:
            raise SimulationError(f"cannot store {key!r}: no peers online")
        self._values[key] = bytes(value)
        self._holders[key] = set()
        self._replenish(key)
        return tuple(sorted(self._holders[key]))

    def get(self, key: str) -> bytes | None:
        if key in self._values and self._holders.get(key):
            return self._values[key]
        return None

    def delete(self, key: str) -> None:
        self._values.pop(key, None)
        self._holders.pop(key, None)

    def holders(self, key: str) -> tuple[str, ...]:
        return tuple(sorted(self._holders.get(key, ())))

    def keys(self) -> tuple[str, ...]:
        return tuple(sorted(self._values))
