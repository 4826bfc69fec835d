"""Column layout of the C-MAPSS files.

Each row is ``unit cycle setting1 setting2 setting3 s1 ... s21``; sensor
names follow the dataset documentation.
"""

SETTINGS = ("setting1", "setting2", "setting3")

SENSORS = (
    "T2",  # total temperature at fan inlet
    "T24",  # total temperature at LPC outlet
    "T30",  # total temperature at HPC outlet
    "T50",  # total temperature at LPT outlet
    "P2",  # pressure at fan inlet
    "P15",  # total pressure in bypass duct
    "P30",  # total pressure at HPC outlet
    "Nf",  # physical fan speed
    "Nc",  # physical core speed
    "epr",  # engine pressure ratio P50/P2
    "Ps30",  # static pressure at HPC outlet
    "phi",  # ratio of fuel flow to Ps30
    "NRf",  # corrected fan speed
    "NRc",  # corrected core speed
    "BPR",  # bypass ratio
    "farB",  # burner fuel-air ratio
    "htBleed",  # bleed enthalpy
    "Nf_dmd",  # demanded fan speed
    "PCNfR_dmd",  # demanded corrected fan speed
    "W31",  # HPT coolant bleed
    "W32",  # LPT coolant bleed
)

CHANNELS = SETTINGS + SENSORS
CHANNEL_INDEX = {name: i for i, name in enumerate(CHANNELS)}
N_CHANNELS = len(CHANNELS)
