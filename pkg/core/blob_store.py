"""
blob_store.py - Armazenamento de blobs endereçado por conteúdo (SHA-256)

Escrita em staging seguida de rename: um blob só aparece na árvore
definitiva completo e com o hash conferido.
"""

import logging
import os
import shutil
import uuid
from dataclasses import dataclass

from .protocol import IntegrityError, NotFound
from .security import Security


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagedBlob:
    checksum: str
    size_bytes: int
    staging_path: str


class BlobStore:
    def __init__(self, root: str) -> None:
        self.root = root
        self.objects_dir = os.path.join(root, "objects")
        self.staging_dir = os.path.join(root, "staging")
        os.makedirs(self.objects_dir, exist_ok=True)
        os.makedirs(self.staging_dir, exist_ok=True)
        self._cleanup_staging()

    def _cleanup_staging(self) -> None:
        # restos de ingestões interrompidas
        for name in os.listdir(self.staging_dir):
            os.remove(os.path.join(self.staging_dir, name))

    @staticmethod
    def local_path(checksum: str) -> str:
        """Chave relativa ao nó: objects/ab/<checksum>.smi"""
        return f"objects/{checksum[:2]}/{checksum}.smi"

    def _absolute(self, checksum: str) -> str:
        return os.path.join(self.root, *self.local_path(checksum).split("/"))

    def stage(self, data: bytes) -> StagedBlob:
        checksum = Security.sha256_hex(data)
        path = os.path.join(self.staging_dir, f"{checksum}.{uuid.uuid4().hex}.tmp")
        with open(path, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        return StagedBlob(checksum, len(data), path)

    def promote(self, staged: StagedBlob) -> bool:
        """Move o blob para a árvore definitiva. False se já existia."""
        target = self._absolute(staged.checksum)
        if os.path.exists(target):
            os.remove(staged.staging_path)
            return False
        os.makedirs(os.path.dirname(target), exist_ok=True)
        shutil.move(staged.staging_path, target)
        return True

    def discard(self, staged: StagedBlob) -> None:
        if os.path.exists(staged.staging_path):
            os.remove(staged.staging_path)

    def delete(self, checksum: str) -> None:
        path = self._absolute(checksum)
        if os.path.exists(path):
            os.remove(path)

    def exists(self, checksum: str) -> bool:
        return os.path.exists(self._absolute(checksum))

    def get(self, checksum: str) -> bytes:
        """
        Lê o blob e confere o hash.

        Raises:
            NotFound: blob ausente
            IntegrityError: conteúdo não confere com a chave
        """
        path = self._absolute(checksum)
        if not os.path.exists(path):
            raise NotFound(f"blob ausente: {checksum}")
        with open(path, "rb") as f:
            data = f.read()
        actual = Security.sha256_hex(data)
        if actual != checksum:
            logger.error(f"Blob corrompido: esperado {checksum}, obtido {actual}")
            raise IntegrityError(f"blob {checksum} corrompido")
        return data
