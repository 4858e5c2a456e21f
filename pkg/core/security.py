"""
security.py - Hashes, comparação segura e formatação de datas
"""

import hashlib
import hmac
import re
from datetime import date, datetime, timezone
from typing import Any, Optional, Union

from dateutil import parser as date_parser


class Security:
    HEX64 = re.compile(r"^[0-9a-f]{64}$")

    @staticmethod
    def sha256_hex(value: Union[str, bytes]) -> str:
        if isinstance(value, str):
            value = value.encode("utf-8")
        return hashlib.sha256(value).hexdigest()

    @staticmethod
    def keyed_hash_hex(key: bytes, value: str) -> str:
        """HMAC-SHA256 de value sob key (usado na pseudonimização)"""
        return hmac.new(key, value.encode("utf-8"), hashlib.sha256).hexdigest()

    @staticmethod
    def digests_match(expected_hex: str, given_hex: str) -> bool:
        return hmac.compare_digest((expected_hex or "").lower(), (given_hex or "").lower())

    @staticmethod
    def is_checksum(value: Any) -> bool:
        return isinstance(value, str) and bool(Security.HEX64.match(value))


class Formatters:
    @staticmethod
    def parse_date(data_val: Any) -> Optional[date]:
        """Converte diversos formatos (ISO, AAAAMMDD, datetime) para date."""
        if data_val is None:
            return None
        if isinstance(data_val, datetime):
            return data_val.date()
        if isinstance(data_val, date):
            return data_val
        if isinstance(data_val, str):
            data_str = data_val.strip()
            if not data_str:
                return None
            try:
                # AAAAMMDD (estilo DICOM) e ISO são aceitos
                return date_parser.parse(data_str, yearfirst=True, dayfirst=False).date()
            except (ValueError, OverflowError):
                return None
        return None

    @staticmethod
    def parse_timestamp(value: Any) -> Optional[datetime]:
        """ISO-8601 estrito; resultados com fuso são convertidos para UTC ingênuo."""
        if isinstance(value, datetime):
            dt = value
        elif isinstance(value, date):
            dt = datetime(value.year, value.month, value.day)
        elif isinstance(value, str) and value.strip():
            try:
                dt = date_parser.isoparse(value.strip())
            except (ValueError, OverflowError):
                return None
        else:
            return None
        if dt.tzinfo is not None:
            dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
        return dt

    @staticmethod
    def normalize_timestamp(value: Any) -> Optional[str]:
        dt = Formatters.parse_timestamp(value)
        if dt is None:
            return None
        if dt.time() == datetime.min.time() and isinstance(value, str) and "T" not in value:
            return dt.date().isoformat()
        return dt.isoformat()

    @staticmethod
    def utc_now_iso() -> str:
        return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")
