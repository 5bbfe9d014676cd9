"""
Binary checkpoints of flat parameter vectors.

Layout, all integers little-endian::

    magic        8 bytes   b'OMDCKPT1'
    n_sections   uint32
    n_sections times:
        name_len uint16
        name     name_len bytes, UTF-8
        offset   uint64    element offset into the data block
        length   uint64    number of elements
    data         float64 little-endian, sections back to back
"""
from pathlib import Path
from typing import Dict, Union
import logging
import struct

import numpy as np
from django.core.exceptions import ValidationError

from autodiff.functional import flatten_arrays, unflatten_like

from .networks import ModelNetworks, QNetworkPair

logger = logging.getLogger(__name__)

MAGIC = b'OMDCKPT1'
FLOAT_DTYPE = np.dtype('<f8')


def save_checkpoint(path: Union[str, Path], sections: Dict[str, np.ndarray]) -> Path:
    """Write named flat float vectors to ``path`` in section order."""
    path = Path(path)
    header = [MAGIC, struct.pack('<I', len(sections))]
    offset = 0
    for name, vector in sections.items():
        encoded = name.encode('utf-8')
        length = int(np.size(vector))
        header.append(struct.pack('<H', len(encoded)) + encoded + struct.pack('<QQ', offset, length))
        offset += length

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as handle:
        handle.write(b''.join(header))
        for vector in sections.values():
            handle.write(np.ravel(np.asarray(vector, dtype=FLOAT_DTYPE)).tobytes())
    logger.info("Saved checkpoint with %d sections to %s", len(sections), path)
    return path


def _read(buffer: bytes, position: int, size: int, path: Path) -> bytes:
    if position + size > len(buffer):
        raise ValidationError(f"Checkpoint {path} is truncated at byte {position}.")
    return buffer[position:position + size]


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read every section of a checkpoint as a flat float64 vector.

    Raises:
        ValidationError: On a wrong magic, a truncated file or sections outside the data block.
    """
    path = Path(path)
    raw = path.read_bytes()
    if _read(raw, 0, len(MAGIC), path) != MAGIC:
        raise ValidationError(f"{path} is not an OMD checkpoint.")
    position = len(MAGIC)
    (count,) = struct.unpack('<I', _read(raw, position, 4, path))
    position += 4

    table = []
    for _ in range(count):
        (name_len,) = struct.unpack('<H', _read(raw, position, 2, path))
        position += 2
        name = _read(raw, position, name_len, path).decode('utf-8')
        position += name_len
        offset, length = struct.unpack('<QQ', _read(raw, position, 16, path))
        position += 16
        table.append((name, offset, length))

    data_bytes = len(raw) - position
    if data_bytes % FLOAT_DTYPE.itemsize:
        raise ValidationError(f"Checkpoint {path} has a data block of {data_bytes} bytes, not whole float64s.")
    data = np.frombuffer(raw, dtype=FLOAT_DTYPE, offset=position)

    sections = {}
    for name, offset, length in table:
        if offset + length > len(data):
            raise ValidationError(f"Section {name!r} of {path} runs past the data block.")
        sections[name] = data[offset:offset + length].astype(np.float64)
    return sections


def agent_sections(q_pair: QNetworkPair, model: ModelNetworks) -> Dict[str, np.ndarray]:
    sections = {}
    for index, (online, target) in enumerate(zip(q_pair.online, q_pair.target)):
        sections[f'q_online_{index}'] = flatten_arrays(online)
        sections[f'q_target_{index}'] = flatten_arrays(target)
    sections['model_dynamics'] = flatten_arrays(model.dynamics)
    sections['model_rewards'] = flatten_arrays(model.rewards)
    return sections


def restore_agent(q_pair: QNetworkPair, model: ModelNetworks, sections: Dict[str, np.ndarray]) -> None:
    """Load ``sections`` written by :func:`agent_sections` into networks of matching shape."""
    try:
        q_pair.online = [unflatten_like(sections[f'q_online_{i}'], net) for i, net in enumerate(q_pair.online)]
        q_pair.target = [unflatten_like(sections[f'q_target_{i}'], net) for i, net in enumerate(q_pair.target)]
        model.dynamics = unflatten_like(sections['model_dynamics'], model.dynamics)
        model.rewards = unflatten_like(sections['model_rewards'], model.rewards)
    except KeyError as exc:
        raise ValidationError(f"Checkpoint is missing section {exc.args[0]!r}.")
