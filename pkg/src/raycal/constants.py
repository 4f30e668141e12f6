"""Physical constants and geometric tolerances shared across modules."""

SPEED_OF_LIGHT = 299792458.0  # m/s
VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m

# geometric tolerances
OCCLUSION_EPS = 1e-5  # m, trimmed from both ends of a visibility segment
UNIT_NORM_TOL = 1e-9
BARYCENTRIC_TOL = 1e-9

# numerical guards
SQRT_FLOOR = 1e-30
SMALL_CONCENTRATION = 1e-4
