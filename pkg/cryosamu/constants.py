# ############################## Generic Bits ############################### #
REPORT_TEXT_PRECISION = 4


# keep track of what extensions are applicable for processing
class EXTENSIONS:
    mrc = 'mrc'
    map = 'map'
    npy = 'npy'
    npz = 'npz'
    json = 'json'
    yaml = 'yaml'
    yml = 'yml'

    maps_all = [mrc, map]
    config_all = [yaml, yml, json]


# ############################### MRC-2014 ################################## #
MRC_HEADER_BYTES = 1024
MRC_READ_MODES = {
    0: "int8",
    1: "int16",
    2: "float32",
    6: "uint16",
}
MRC_WRITE_MODE = 2
# First byte of the machine stamp
MRC_BIG_ENDIAN_STAMP = 0x11


# ########################### Protein structures ############################ #
BACKBONE_ATOMS = ("N", "CA", "C")

STANDARD_RESIDUES = frozenset([
    "ALA", "ARG", "ASN", "ASP", "CYS",
    "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO",
    "SER", "THR", "TRP", "TYR", "VAL",
])

UNKNOWN_RESIDUES = frozenset(["UNK"])

HYDROGENS = frozenset(["H", "D"])

# Atomic numbers for elements found in deposited protein models
ATOMIC_NUMBERS = {
    "H": 1, "D": 1, "HE": 2,
    "LI": 3, "BE": 4, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "NE": 10,
    "NA": 11, "MG": 12, "AL": 13, "SI": 14, "P": 15, "S": 16, "CL": 17,
    "AR": 18, "K": 19, "CA": 20, "SC": 21, "TI": 22, "V": 23, "CR": 24,
    "MN": 25, "FE": 26, "CO": 27, "NI": 28, "CU": 29, "ZN": 30, "GA": 31,
    "GE": 32, "AS": 33, "SE": 34, "BR": 35, "KR": 36, "RB": 37, "SR": 38,
    "Y": 39, "ZR": 40, "MO": 42, "RU": 44, "RH": 45, "PD": 46, "AG": 47,
    "CD": 48, "IN": 49, "SN": 50, "SB": 51, "TE": 52, "I": 53, "XE": 54,
    "CS": 55, "BA": 56, "LA": 57, "GD": 64, "YB": 70, "W": 74, "RE": 75,
    "OS": 76, "IR": 77, "PT": 78, "AU": 79, "HG": 80, "TL": 81, "PB": 82,
    "BI": 83, "U": 92,
}


# ############################ Simulation ################################### #
DEFAULT_RESOLUTION = 2.0
DEFAULT_GRID_INTERVAL = 1.0
MAX_RESOLUTION = 100.0
# Truncation radius in units of 1/sqrt(k)
CUTOFF_SCALE = 4.0


# ############################## Pooling #################################### #
DEFAULT_EMBED_DIM = 512
DEFAULT_EMBED_LEN = 800


# ############################## Tiling ##################################### #
DEFAULT_TARGET_VOXEL = 1.0
DEFAULT_PERCENTILE = 99.9
DEFAULT_CUBE_SIZE = 64
DEFAULT_CORE_SIZE = 50
DEFAULT_PAD = 64


# ############################## Metrics #################################### #
DEFAULT_ATOM_VOLUME = 16.0
DEFAULT_PEAK_FRACTION = 0.1
DEFAULT_RSCC_THRESHOLD = 0.01
DEFAULT_RSCC_MIN_SUPPORT = 8
FSC_THRESHOLD = 0.5


# ############################## Weights #################################### #
WEIGHTS_FORMAT_VERSION = "1.0"
WEIGHTS_MANIFEST_NAME = "manifest.json"
WEIGHTS_BLOB_NAME = "weights.bin"
