"""
anonymizer.py - Desidentificação antes de qualquer persistência

Pseudônimos determinísticos por site (HMAC-SHA256 sob a chave do site) e
mapa de reidentificação cifrado (Fernet) mantido só no nó de origem.
"""

import base64
import json
import logging
import os
import threading
from typing import Any, Dict, Optional, Tuple

from cryptography.fernet import Fernet, InvalidToken

from .protocol import ConsentMissing, Malformed, canonical_json
from .security import Formatters, Security


logger = logging.getLogger(__name__)

PSEUDONYM_PREFIX = "P-"
PSEUDONYM_HEX = 16
IDENTIFYING_FIELDS = ("patient_name", "patient_id", "birth_date")


class SiteKey:
    """Chave secreta do site: arquivo com uma chave Fernet (base64 url-safe de 32 bytes)"""

    def __init__(self, key: bytes) -> None:
        try:
            self._fernet = Fernet(key)
            raw = base64.urlsafe_b64decode(key)
        except (ValueError, TypeError) as e:
            raise Malformed(f"chave de site inválida: {e}")
        self._hmac_key = raw

    @classmethod
    def generate(cls, path: str) -> "SiteKey":
        if os.path.exists(path):
            raise FileExistsError(f"Chave já existe: {path}")
        key = Fernet.generate_key()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
        with os.fdopen(fd, "wb") as f:
            f.write(key)
        logger.info(f"Chave de site gerada em {path}")
        return cls(key)

    @classmethod
    def load(cls, path: str) -> "SiteKey":
        with open(path, "rb") as f:
            return cls(f.read().strip())

    @property
    def hmac_key(self) -> bytes:
        return self._hmac_key

    def encrypt(self, data: bytes) -> bytes:
        return self._fernet.encrypt(data)

    def decrypt(self, token: bytes) -> bytes:
        return self._fernet.decrypt(token)


def pseudonymize(patient_id: str, site_key: SiteKey) -> str:
    """P- + 16 primeiros hex de HMAC-SHA256(chave do site, patient_id)"""
    if not isinstance(patient_id, str) or not patient_id.strip():
        raise Malformed("patient_id vazio")
    return PSEUDONYM_PREFIX + Security.keyed_hash_hex(site_key.hmac_key, patient_id)[:PSEUDONYM_HEX]


class ReidentificationMap:
    """
    pseudônimo -> identificadores originais. Uma linha por entrada, cada
    linha um token Fernet do JSON da entrada; a última entrada vence.
    """

    def __init__(self, path: str, site_key: SiteKey) -> None:
        self.path = path
        self.site_key = site_key
        self._lock = threading.Lock()
        self._entries: Dict[str, Dict[str, Any]] = {}
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._load()

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "rb") as f:
            for numero, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(self.site_key.decrypt(line))
                except (InvalidToken, ValueError):
                    logger.warning(f"Linha {numero} do mapa de reidentificação ilegível com a chave atual")
                    continue
                self._entries[entry["pseudonym"]] = entry

    def upsert(self, pseudonym: str, identifiers: Dict[str, Any]) -> None:
        entry = dict(identifiers)
        entry["pseudonym"] = pseudonym
        with self._lock:
            if self._entries.get(pseudonym) == entry:
                return
            token = self.site_key.encrypt(canonical_json(entry).encode("utf-8"))
            with open(self.path, "ab") as f:
                f.write(token + b"\n")
                f.flush()
                os.fsync(f.fileno())
            self._entries[pseudonym] = entry

    def lookup(self, pseudonym: str) -> Optional[Dict[str, Any]]:
        with self._lock:
            entry = self._entries.get(pseudonym)
            return dict(entry) if entry else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class Anonymizer:
    def __init__(self, site_key: SiteKey, reid_map: Optional[ReidentificationMap] = None) -> None:
        self.site_key = site_key
        self.reid_map = reid_map

    def pseudonymize(self, patient_id: str, identifiers: Optional[Dict[str, Any]] = None,
                     remember: bool = True) -> str:
        pseudonym = pseudonymize(patient_id, self.site_key)
        if remember:
            self.remember(pseudonym, identifiers or {"patient_id": patient_id})
        return pseudonym

    def remember(self, pseudonym: str, identifiers: Dict[str, Any]) -> None:
        if self.reid_map is not None:
            self.reid_map.upsert(pseudonym, identifiers)

    def strip_identifiers(self, header: Dict[str, Any],
                          remember: bool = True) -> Tuple[Dict[str, Any], Dict[str, Any]]:
        """
        Remove o nome, troca o patient_id pelo pseudônimo e reduz a data de
        nascimento ao ano. Os identificadores extraídos vão apenas para o
        mapa de reidentificação; com remember=False o chamador grava a entrada
        com remember() quando a operação que a motivou for confirmada.

        Raises:
            ConsentMissing: consent diferente de "Y"
            Malformed: patient_id ausente ou data de nascimento inválida
        """
        if header.get("consent") != "Y":
            raise ConsentMissing(f"estudo {header.get('study_id', '?')} sem consentimento do paciente")
        extracted = {k: header[k] for k in IDENTIFYING_FIELDS if header.get(k) is not None}
        sanitized = {k: v for k, v in header.items() if k not in IDENTIFYING_FIELDS}
        birth_date = header.get("birth_date")
        if birth_date:
            parsed = Formatters.parse_date(birth_date)
            if parsed is None:
                raise Malformed("birth_date inválida")
            sanitized["birth_year"] = parsed.year
        sanitized["pseudonym"] = self.pseudonymize(header.get("patient_id"), extracted, remember)
        return sanitized, extracted
