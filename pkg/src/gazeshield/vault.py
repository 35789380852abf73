"""Epoch-scoped pseudonyms for student ids, resolvable only by an administrator.

A dummy id is ``<word><3 digits>`` chosen by HMAC-SHA256 keyed with ``ek1``
over (epoch, true id, counter); the counter is bumped on collisions, so the
mapping stays injective within an epoch.  The vault file never stores a true
id in the clear: the forward table is keyed by an HMAC tag of the id and the
reverse table holds AES-GCM ciphertexts under a key that needs both ``ek1``
and ``ek2``.  ``ek2`` and the key wrapping ``ek1`` are derived from the admin
passphrase with PBKDF2.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import hmac
import json
import os
import re
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

VAULT_FORMAT = "gazeshield.vault"
VAULT_VERSION = 1
DUMMY_PATTERN = re.compile(r"^[a-z]+[0-9]{3}$")
DEFAULT_ITERATIONS = 200_000
MIN_WORDS = 64

DEFAULT_WORDS = (
    "acorn", "amber", "anchor", "apple", "aspen", "aster", "badger", "basil", "beacon", "birch",
    "bison", "bramble", "breeze", "brook", "cedar", "cherry", "clover", "comet", "coral", "cricket",
    "daisy", "delta", "dune", "ember", "falcon", "fern", "finch", "fjord", "flint", "frost",
    "garnet", "ginger", "glade", "granite", "harbor", "hazel", "heron", "holly", "indigo", "iris",
    "ivy", "jasper", "juniper", "kestrel", "kiwi", "lagoon", "lark", "laurel", "lemon", "lilac",
    "linden", "lotus", "lynx", "maple", "marble", "meadow", "mango", "mist", "moss", "nectar",
    "nutmeg", "oak", "olive", "onyx", "orchid", "otter", "pebble", "pepper", "pine", "plum",
    "poppy", "quartz", "quill", "raven", "reed", "ridge", "robin", "saffron", "sage", "sparrow",
    "spruce", "summit", "tansy", "thistle", "tulip", "tundra", "valley", "violet", "walnut", "willow",
    "wren", "yarrow", "zephyr", "zinnia",
)


class VaultError(Exception):
    pass


class AuthorizationError(VaultError):
    """Bad credential or wrong/missing key.  Says nothing about the dummy."""


class NotFoundError(VaultError):
    pass


class StaleEpochError(VaultError):
    """The dummy belongs to an earlier epoch and no epoch was given."""


class NamespaceExhaustedError(VaultError):
    pass


@dataclass(frozen=True)
class VaultKeys:
    ek1: bytes
    ek2: bytes | None = None

    def __repr__(self) -> str:  # keep key bytes out of logs and tracebacks
        return f"VaultKeys(ek1=<{len(self.ek1)} bytes>, ek2={'<set>' if self.ek2 else None})"


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: str
    epoch: int | None
    dummy: str
    outcome: str

    def to_dict(self) -> dict:
        return {"seq": self.seq, "timestamp": self.timestamp, "epoch": self.epoch,
                "dummy": self.dummy, "outcome": self.outcome}


@dataclass
class _EpochTable:
    epoch: int
    issued_at: str
    forward: dict[str, str] = field(default_factory=dict)  # id tag (hex) -> dummy
    reverse: dict[str, dict] = field(default_factory=dict)  # dummy -> {nonce, ciphertext}


def _u64(n: int) -> bytes:
    return int(n).to_bytes(8, "big", signed=True)


def dummy_candidate(ek1: bytes, epoch: int, true_id: int, counter: int, words) -> str:
    """The keyed PRF: HMAC-SHA256(ek1, tag || epoch || id || counter) -> word + suffix."""
    msg = b"gazeshield/dummy/v1" + _u64(epoch) + _u64(true_id) + int(counter).to_bytes(4, "big")
    d = hmac.new(ek1, msg, hashlib.sha256).digest()
    word = words[int.from_bytes(d[:8], "big") % len(words)]
    return f"{word}{int.from_bytes(d[8:16], 'big') % 1000:03d}"


def _id_tag(ek1: bytes, true_id: int) -> str:
    return hmac.new(ek1, b"gazeshield/tag/v1" + _u64(true_id), hashlib.sha256).hexdigest()


def _check_value(key: bytes, label: bytes) -> str:
    return hmac.new(key, b"gazeshield/check/" + label, hashlib.sha256).hexdigest()[:16]


def _reverse_key(keys: VaultKeys) -> bytes:
    return hmac.new(keys.ek2, b"gazeshield/reverse/v1" + keys.ek1, hashlib.sha256).digest()


def _derive(passphrase: str, salt: bytes, iterations: int) -> tuple[bytes, bytes, bytes]:
    """(credential verifier, ek2, key-encryption key) from one PBKDF2 stretch."""
    raw = hashlib.pbkdf2_hmac("sha256", passphrase.encode("utf-8"), salt, iterations, dklen=96)
    return raw[:32], raw[32:64], raw[64:]


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Vault:
    """In-memory vault state; :meth:`save` persists it.  One writer at a time."""

    def __init__(self, doc: dict, clock: Callable[[], str] | None = None):
        if doc.get("format") != VAULT_FORMAT or doc.get("version") != VAULT_VERSION:
            raise VaultError("not a vault document of a supported version")
        self._doc = doc
        self._clock = clock or _utc_now
        self.words = tuple(doc["words"])
        self._epochs: dict[int, _EpochTable] = {}
        for e in doc["epochs"]:
            table = _EpochTable(int(e["epoch"]), e["issued_at"])
            table.forward = {r["tag"]: r["dummy"] for r in e["forward"]}
            table.reverse = {r["dummy"]: {"nonce": r["nonce"], "ciphertext": r["ciphertext"]} for r in e["reverse"]}
            self._epochs[table.epoch] = table
        self._audit = [AuditEntry(**a) for a in doc["audit"]]
        self.epoch = int(doc["epoch"])

    # creation and unlocking

    @classmethod
    def create(cls, passphrase: str, iterations: int = DEFAULT_ITERATIONS, words: Iterable[str] = DEFAULT_WORDS,
               clock: Callable[[], str] | None = None, ek1: bytes | None = None) -> tuple[Vault, VaultKeys]:
        words = tuple(words)
        if len(words) < MIN_WORDS or len(set(words)) != len(words):
            raise VaultError(f"the word list needs at least {MIN_WORDS} distinct words")
        if any(not re.fullmatch(r"[a-z]+", w) for w in words):
            raise VaultError("words must be lowercase ascii letters")
        if not passphrase:
            raise VaultError("an admin passphrase is required")
        ek1 = secrets.token_bytes(32) if ek1 is None else ek1
        if len(ek1) != 32:
            raise VaultError("ek1 must be 256 bits")
        salt = secrets.token_bytes(16)
        verifier, ek2, kek = _derive(passphrase, salt, iterations)
        nonce = secrets.token_bytes(12)
        wrapped = AESGCM(kek).encrypt(nonce, ek1, b"gazeshield/ek1")
        doc = {
            "format": VAULT_FORMAT,
            "version": VAULT_VERSION,
            "epoch": 0,
            "credential": {"algorithm": "pbkdf2_sha256", "iterations": iterations,
                           "salt": salt.hex(), "verifier": verifier.hex()},
            "ek1_wrapped": {"nonce": nonce.hex(), "ciphertext": wrapped.hex()},
            "key_check": {"ek1": _check_value(ek1, b"ek1"), "ek2": _check_value(ek2, b"ek2")},
            "words": list(words),
            "epochs": [],
            "audit": [],
        }
        return cls(doc, clock), VaultKeys(ek1, ek2)

    @classmethod
    def load(cls, path, clock: Callable[[], str] | None = None) -> Vault:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise VaultError(f"no vault at {path}") from None
        except json.JSONDecodeError as exc:
            raise VaultError(f"vault file {path} is corrupt: {exc}") from None
        return cls(doc, clock)

    def _verify(self, passphrase: str) -> tuple[bytes, bytes]:
        cred = self._doc["credential"]
        verifier, ek2, kek = _derive(passphrase or "", bytes.fromhex(cred["salt"]), int(cred["iterations"]))
        if not hmac.compare_digest(verifier.hex(), cred["verifier"]):
            raise AuthorizationError("authorization failed")
        return ek2, kek

    def unlock(self, passphrase: str) -> VaultKeys:
        """Both keys from the admin passphrase."""
        ek2, kek = self._verify(passphrase)
        w = self._doc["ek1_wrapped"]
        try:
            ek1 = AESGCM(kek).decrypt(bytes.fromhex(w["nonce"]), bytes.fromhex(w["ciphertext"]), b"gazeshield/ek1")
        except InvalidTag:
            raise AuthorizationError("authorization failed") from None
        return VaultKeys(ek1, ek2)

    def _check_keys(self, keys: VaultKeys, need_ek2: bool) -> None:
        if keys is None or not keys.ek1 or not hmac.compare_digest(
                _check_value(keys.ek1, b"ek1"), self._doc["key_check"]["ek1"]):
            raise AuthorizationError("authorization failed")
        if need_ek2 and (not keys.ek2 or not hmac.compare_digest(
                _check_value(keys.ek2, b"ek2"), self._doc["key_check"]["ek2"])):
            raise AuthorizationError("authorization failed")

    # issuance

    @property
    def capacity(self) -> int:
        return len(self.words) * 1000

    def _table(self, epoch: int) -> _EpochTable:
        if epoch not in self._epochs:
            self._epochs[epoch] = _EpochTable(epoch, self._clock())
        return self._epochs[epoch]

    def issue_dummy(self, true_id: int, keys: VaultKeys) -> str:
        """Dummy for ``true_id`` in the current epoch (stable once issued)."""
        self._check_keys(keys, need_ek2=True)
        true_id = int(true_id)
        table = self._table(self.epoch)
        tag = _id_tag(keys.ek1, true_id)
        if tag in table.forward:
            return table.forward[tag]
        if len(table.forward) >= self.capacity:
            raise NamespaceExhaustedError(f"all {self.capacity} dummy names are used in epoch {self.epoch}")
        prev = self._epochs.get(self.epoch - 1)
        stale = prev.forward.get(tag) if prev is not None else None
        counter = 0
        while True:
            dummy = dummy_candidate(keys.ek1, self.epoch, true_id, counter, self.words)
            # re-draw on collision, and never reuse this id's name from the previous epoch
            if dummy not in table.reverse and dummy != stale:
                break
            counter += 1
        nonce = secrets.token_bytes(12)
        aad = f"{self.epoch}:{dummy}".encode()
        ct = AESGCM(_reverse_key(keys)).encrypt(nonce, str(true_id).encode(), aad)
        table.forward[tag] = dummy
        table.reverse[dummy] = {"nonce": nonce.hex(), "ciphertext": ct.hex()}
        return dummy

    def issue_many(self, true_ids: Iterable[int], keys: VaultKeys) -> dict[int, str]:
        return {int(s): self.issue_dummy(s, keys) for s in sorted({int(s) for s in true_ids})}

    def rotate_epoch(self) -> int:
        self.epoch += 1
        return self.epoch

    def dummies(self, epoch: int | None = None) -> list[str]:
        """Dummy names issued in an epoch (public information)."""
        table = self._epochs.get(self.epoch if epoch is None else epoch)
        return sorted(table.reverse) if table else []

    def forward_map(self, keys: VaultKeys, true_ids: Iterable[int], epoch: int | None = None) -> dict[int, str]:
        """Lookup (no issuance) of already-issued dummies."""
        self._check_keys(keys, need_ek2=False)
        table = self._epochs.get(self.epoch if epoch is None else epoch)
        out = {}
        for s in true_ids:
            tag = _id_tag(keys.ek1, int(s))
            if table is None or tag not in table.forward:
                raise NotFoundError("id has no dummy in that epoch")
            out[int(s)] = table.forward[tag]
        return out

    # resolution

    def _log(self, epoch: int | None, dummy: str, outcome: str) -> None:
        self._audit.append(AuditEntry(len(self._audit), self._clock(), epoch, str(dummy), outcome))

    def resolve_dummy(self, dummy: str, epoch: int | None, keys: VaultKeys | None, admin_credential: str) -> int:
        """True id behind ``dummy``; needs the admin passphrase and both keys.

        With ``epoch=None`` the current epoch is searched and a dummy that only
        exists in an older epoch raises :class:`StaleEpochError`.
        """
        try:
            self._verify(admin_credential)
            self._check_keys(keys, need_ek2=True)
        except AuthorizationError:
            self._log(epoch, dummy, "denied")
            raise
        target = self.epoch if epoch is None else int(epoch)
        table = self._epochs.get(target)
        if table is None or dummy not in table.reverse:
            if epoch is None and any(dummy in t.reverse for e, t in self._epochs.items() if e < target):
                self._log(epoch, dummy, "stale_epoch")
                raise StaleEpochError("dummy belongs to an earlier epoch; pass the epoch explicitly")
            self._log(epoch, dummy, "not_found")
            raise NotFoundError("no such dummy in the requested epoch")
        entry = table.reverse[dummy]
        try:
            plain = AESGCM(_reverse_key(keys)).decrypt(
                bytes.fromhex(entry["nonce"]), bytes.fromhex(entry["ciphertext"]), f"{target}:{dummy}".encode())
        except InvalidTag:
            self._log(epoch, dummy, "denied")
            raise AuthorizationError("authorization failed") from None
        self._log(target, dummy, "resolved")
        return int(plain.decode())

    @property
    def audit_log(self) -> tuple[AuditEntry, ...]:
        return tuple(self._audit)

    # persistence

    def to_dict(self) -> dict:
        doc = dict(self._doc)
        doc["epoch"] = self.epoch
        doc["epochs"] = [
            {
                "epoch": t.epoch,
                "issued_at": t.issued_at,
                "forward": [{"tag": k, "dummy": v} for k, v in sorted(t.forward.items())],
                "reverse": [{"dummy": d, **t.reverse[d]} for d in sorted(t.reverse)],
            }
            for t in sorted(self._epochs.values(), key=lambda t: t.epoch)
        ]
        doc["audit"] = [a.to_dict() for a in self._audit]
        return doc

    def save(self, path) -> None:
        """Atomic write (temp file + rename) with owner-only permissions."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.chmod(tmp, 0o600)
        os.replace(tmp, path)


def is_dummy(name: str) -> bool:
    return bool(DUMMY_PATTERN.match(name))
