"""Physical constants (SI units)."""

FARADAY = 96485.33212  # C/mol
GAS_CONSTANT = 8.314462618  # J/(mol K)
KELVIN_OFFSET = 273.15  # K at 0 degC
