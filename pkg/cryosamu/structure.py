"""
Fixed-column PDB reader.

Only ATOM records of the first model are read. Hydrogens, alternate locations
other than 'A' and unknown (UNK) residues are dropped on the way in, so what
remains is the set of heavy atoms used for density simulation.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, Union
import logging
import pathlib

import numpy as np

from .constants import (
    ATOMIC_NUMBERS,
    BACKBONE_ATOMS,
    HYDROGENS,
    STANDARD_RESIDUES,
    UNKNOWN_RESIDUES,
)
from .lib import StructureParseError

logger = logging.getLogger(__name__)


@dataclass
class Atom:
    name: str
    element_number: int
    position: Tuple[float, float, float]

    @property
    def is_backbone(self) -> bool:
        return self.name in BACKBONE_ATOMS


@dataclass
class Residue:
    name: str
    seq_id: int
    icode: str = ""
    atoms: List[Atom] = field(default_factory=list)

    def atom(self, name: str) -> Optional[Atom]:
        return next((a for a in self.atoms if a.name == name), None)

    @property
    def has_backbone(self) -> bool:
        names = {a.name for a in self.atoms}
        return all(n in names for n in BACKBONE_ATOMS)

    @property
    def is_standard(self) -> bool:
        return self.name in STANDARD_RESIDUES and self.has_backbone

    @property
    def key(self) -> Tuple[int, str]:
        return self.seq_id, self.icode


@dataclass
class Chain:
    chain_id: str
    residues: List[Residue] = field(default_factory=list)


@dataclass
class ProteinStructure:
    chains: List[Chain]
    source_id: str = ""

    def atoms(self) -> Iterable[Atom]:
        for chain in self.chains:
            for residue in chain.residues:
                yield from residue.atoms

    def residues(self) -> Iterable[Tuple[str, Residue]]:
        for chain in self.chains:
            for residue in chain.residues:
                yield chain.chain_id, residue

    @property
    def n_atoms(self) -> int:
        return sum(1 for _ in self.atoms())

    def coordinates(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms()], dtype=np.float64).reshape(-1, 3)

    def element_numbers(self) -> np.ndarray:
        return np.array([a.element_number for a in self.atoms()], dtype=np.float64)

    def find_residue(self, chain_id: str, seq_id: int, icode: str = "") -> Optional[Residue]:
        for chain in self.chains:
            if chain.chain_id != chain_id:
                continue
            for residue in chain.residues:
                if residue.seq_id == seq_id and residue.icode == icode:
                    return residue
        return None

    def translated(self, shift) -> "ProteinStructure":
        shift = np.asarray(shift, dtype=float)
        return ProteinStructure(
            chains=[
                Chain(c.chain_id, [
                    Residue(r.name, r.seq_id, r.icode, [
                        Atom(a.name, a.element_number,
                             tuple(np.asarray(a.position) + shift))
                        for a in r.atoms
                    ])
                    for r in c.residues
                ])
                for c in self.chains
            ],
            source_id=self.source_id,
        )


def element_number(symbol: str) -> Optional[int]:
    return ATOMIC_NUMBERS.get(symbol.strip().upper())


def _infer_element(line: str) -> str:
    element = line[76:78].strip()
    if element:
        return element.upper()

    # Atom-name heuristic: one-letter elements are right-justified into
    # column 14, two-letter elements start in column 13.
    name_field = line[12:16].upper()
    if not name_field[0].isalpha():
        letters = [c for c in name_field[1:] if c.isalpha()]
        return letters[0] if letters else ""
    if name_field[0] in HYDROGENS and name_field[3] != " ":
        # four-character hydrogen names (HG21, HD11, ...)
        return "H"
    if name_field[:2] in ATOMIC_NUMBERS and name_field[1].isalpha():
        return name_field[:2]
    return name_field[0]


def _parse_atom_line(line: str, lineno: int, path) -> Optional[Tuple[str, str, int, str, Atom]]:
    line = line.rstrip("\r\n").ljust(80)[:80]

    altloc = line[16]
    if altloc not in (" ", "A"):
        return None

    res_name = line[17:20].strip()
    if res_name in UNKNOWN_RESIDUES:
        return None

    element = _infer_element(line)
    if element in HYDROGENS:
        return None

    try:
        seq_id = int(line[22:26])
        position = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
    except ValueError:
        raise StructureParseError(
            f"{path}:{lineno}: malformed residue number or coordinate fields")
    if not all(np.isfinite(position)):
        raise StructureParseError(f"{path}:{lineno}: non-finite coordinates")

    z = element_number(element)
    if z is None:
        raise StructureParseError(f"{path}:{lineno}: unknown element '{element}'")

    atom = Atom(name=line[12:16].strip(), element_number=z, position=position)
    return line[21], res_name, seq_id, line[26].strip(), atom


def parse_pdb(lines: Iterable[str], source_id: str = "", path="<string>") -> ProteinStructure:
    chains: Dict[str, "OrderedDict[Tuple[int, str], Residue]"] = OrderedDict()

    for lineno, line in enumerate(lines, start=1):
        record = line[:6]
        if record.startswith("ENDMDL"):
            break
        if record.startswith("HEADER") and not source_id:
            source_id = line[62:66].strip()
            continue
        if record != "ATOM  ":
            continue

        parsed = _parse_atom_line(line, lineno, path)
        if parsed is None:
            continue
        chain_id, res_name, seq_id, icode, atom = parsed

        residues = chains.setdefault(chain_id, OrderedDict())
        residue = residues.get((seq_id, icode))
        if residue is None:
            residue = residues[(seq_id, icode)] = Residue(res_name, seq_id, icode)
        if residue.atom(atom.name) is None:
            residue.atoms.append(atom)

    if not chains:
        raise StructureParseError(f"{path}: no protein atoms")

    return ProteinStructure(
        chains=[
            Chain(chain_id, sorted(residues.values(), key=lambda r: r.key))
            for chain_id, residues in chains.items()
        ],
        source_id=source_id,
    )


def read_pdb(path: Union[str, pathlib.Path]) -> ProteinStructure:
    path = pathlib.Path(path)
    # undecodable bytes only matter if they land in a parsed column
    with path.open(encoding="utf-8", errors="replace") as handle:
        structure = parse_pdb(handle, path=path)
    if not structure.source_id:
        structure.source_id = path.stem
    logger.debug(f"Read {path}: {len(structure.chains)} chains, "
                 f"{structure.n_atoms} heavy atoms")
    return structure


def backbone_of(structure: ProteinStructure) -> "OrderedDict[str, np.ndarray]":
    """
    Per-chain (n, 3, 3) arrays of N, CA, C positions for standard residues
    with a complete backbone, chain order preserved.
    """
    backbone = OrderedDict()
    for chain in structure.chains:
        triples = [
            [residue.atom(name).position for name in BACKBONE_ATOMS]
            for residue in chain.residues
            if residue.is_standard
        ]
        backbone[chain.chain_id] = np.array(triples, dtype=np.float64).reshape(-1, 3, 3)
        logger.info(f"Chain {chain.chain_id}: {len(triples)} of "
                    f"{len(chain.residues)} residues with complete backbone")

    if not any(len(v) for v in backbone.values()):
        logger.warning(f"{structure.source_id}: no residues with a complete backbone")
    return backbone


def structure_from_records(records: Iterable[Tuple], source_id: str = "toy") -> ProteinStructure:
    """
    Build a structure from (chain_id, res_name, seq_id, atom_name, element, x, y, z)
    tuples. Records are taken as given, no filtering is applied.
    """
    chains: Dict[str, "OrderedDict[int, Residue]"] = OrderedDict()
    for chain_id, res_name, seq_id, atom_name, element, x, y, z in records:
        residues = chains.setdefault(chain_id, OrderedDict())
        residue = residues.setdefault(seq_id, Residue(res_name, seq_id))
        z_number = element_number(element)
        if z_number is None:
            raise StructureParseError(f"Unknown element '{element}'")
        residue.atoms.append(Atom(atom_name, z_number, (float(x), float(y), float(z))))
    return ProteinStructure(
        chains=[Chain(c, sorted(r.values(), key=lambda r: r.key)) for c, r in chains.items()],
        source_id=source_id,
    )
