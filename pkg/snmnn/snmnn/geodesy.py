'''
Conversions between local ENU, ECEF and geodetic coordinates on the
WGS-84 ellipsoid.

ECEF to geodetic uses Vermeille's closed form (2004):

    p = (X^2 + Y^2) / a^2
    q = (1 - e^2) Z^2 / a^2
    r = (p + q - e^4) / 6
    s = e^4 p q / (4 r^3)
    t = cbrt(1 + s + sqrt(s (2 + s)))
    u = r (1 + t + 1 / t)
    v = sqrt(u^2 + e^4 q)
    w = e^2 (u + v - q) / (2 v)
    k = sqrt(u + v + w^2) - w
    D = k sqrt(X^2 + Y^2) / (k + e^2)

    phi    = 2 atan(Z / (D + sqrt(D^2 + Z^2)))
    lambda = 2 atan(Y / (X + sqrt(X^2 + Y^2)))
    h      = (k + e^2 - 1) / k * sqrt(D^2 + Z^2)

The longitude half-angle is evaluated as 2 atan((rho - X) / Y) when X < 0
so that it stays well conditioned next to the antimeridian.  Points on
the polar axis (|(X, Y)| < 1e-9 m) get lambda = 0 and phi = +-pi/2.
Points closer to the geocenter than e^2 a are rejected.

Angles are in radians, lengths in meters.
'''

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from snmnn.custom_exceptions import DimensionError, GeodesyError

POLE_EPSILON_M = 1e-9


@dataclass(frozen=True)
class Wgs84:
    a: float = 6378137.0
    f: float = 1.0 / 298.257223563

    @property
    def e2(self):
        # type: () -> float
        return self.f * (2.0 - self.f)

    @property
    def b(self):
        # type: () -> float
        return self.a * (1.0 - self.f)


WGS84 = Wgs84()


@dataclass(frozen=True)
class EnuCoord:
    e: float
    n: float
    u: float

    def __post_init__(self):
        # type: () -> None
        if not all(math.isfinite(value) for value in (self.e, self.n, self.u)):
            raise GeodesyError('ENU coordinates must be finite, got {}'.format(self))

    def as_array(self):
        # type: () -> np.ndarray
        return np.array([self.e, self.n, self.u])


@dataclass(frozen=True)
class EcefCoord:
    x: float
    y: float
    z: float

    def __post_init__(self):
        # type: () -> None
        if not all(math.isfinite(value) for value in (self.x, self.y, self.z)):
            raise GeodesyError('ECEF coordinates must be finite, got {}'.format(self))

    def as_array(self):
        # type: () -> np.ndarray
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class GeodeticCoord:
    phi: float
    lam: float
    z_alt: float

    def __post_init__(self):
        # type: () -> None
        if not all(math.isfinite(value) for value in (self.phi, self.lam, self.z_alt)):
            raise GeodesyError('geodetic coordinates must be finite, got {}'.format(self))
        if not -0.5 * math.pi <= self.phi <= 0.5 * math.pi:
            raise GeodesyError('latitude {!r} rad outside [-pi/2, pi/2]'.format(self.phi))
        if not -math.pi < self.lam <= math.pi:
            raise GeodesyError('longitude {!r} rad outside (-pi, pi]'.format(self.lam))

    @classmethod
    def from_degrees(cls, lat, lon, alt):
        # type: (float, float, float) -> GeodeticCoord
        return cls(math.radians(lat), math.radians(lon), alt)

    def to_degrees(self):
        # type: () -> Tuple[float, float, float]
        return math.degrees(self.phi), math.degrees(self.lam), self.z_alt

    def as_array(self):
        # type: () -> np.ndarray
        return np.array([self.phi, self.lam, self.z_alt])


def _triples(values, what):
    # type: (np.ndarray, str) -> np.ndarray
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array[np.newaxis, :]
    if array.ndim != 2 or array.shape[1] != 3:
        raise DimensionError(what, 3, array.shape[-1])
    if not np.all(np.isfinite(array)):
        raise GeodesyError('{} contains non-finite values'.format(what))
    return array


def geodetic_to_ecef_array(geodetic, datum=WGS84):
    # type: (np.ndarray, Wgs84) -> np.ndarray
    '''(N, 3) rows of (phi, lambda, h) to (N, 3) rows of (X, Y, Z).'''
    geodetic = _triples(geodetic, 'geodetic coordinates')
    phi, lam, h = geodetic[:, 0], geodetic[:, 1], geodetic[:, 2]
    sin_phi = np.sin(phi)
    cos_phi = np.cos(phi)
    N = datum.a / np.sqrt(1.0 - datum.e2 * sin_phi * sin_phi)
    return np.column_stack([(N + h) * cos_phi * np.cos(lam),
                            (N + h) * cos_phi * np.sin(lam),
                            (N * (1.0 - datum.e2) + h) * sin_phi])


def half_angle_longitude(X, Y):
    # type: (np.ndarray, np.ndarray) -> np.ndarray
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    rho = np.hypot(X, Y)
    with np.errstate(divide='ignore', invalid='ignore'):
        east = 2.0 * np.arctan(Y / (X + rho))
        west = 2.0 * np.arctan((rho - X) / Y)
    lam = np.where(X >= 0.0, east, west)
    lam = np.where(((X < 0.0) & (Y == 0.0)) | (lam <= -math.pi), math.pi, lam)
    return np.where(rho < POLE_EPSILON_M, 0.0, lam)


def ecef_to_geodetic_array(ecef, datum=WGS84):
    # type: (np.ndarray, Wgs84) -> np.ndarray
    '''(N, 3) rows of (X, Y, Z) to (N, 3) rows of (phi, lambda, h).'''
    ecef = _triples(ecef, 'ECEF coordinates')
    X, Y, Z = ecef[:, 0], ecef[:, 1], ecef[:, 2]
    a, e2 = datum.a, datum.e2
    e4 = e2 * e2
    if np.any(np.linalg.norm(ecef, axis=1) < e2 * a):
        raise GeodesyError('point within {:.0f} m of the geocenter has no unique '
                           'geodetic coordinates'.format(e2 * a))

    rho = np.hypot(X, Y)
    p = (rho / a) ** 2
    q = (1.0 - e2) * (Z / a) ** 2
    r = (p + q - e4) / 6.0
    if np.any(r <= 0.0):
        raise GeodesyError('point too close to the geocenter for a unique geodetic solution')
    s = e4 * p * q / (4.0 * r ** 3)
    t = np.cbrt(1.0 + s + np.sqrt(s * (2.0 + s)))
    u = r * (1.0 + t + 1.0 / t)
    v = np.sqrt(u * u + e4 * q)
    w = e2 * (u + v - q) / (2.0 * v)
    k = np.sqrt(u + v + w * w) - w
    D = k * rho / (k + e2)
    slant = np.hypot(D, Z)

    phi = 2.0 * np.arctan2(Z, D + slant)
    lam = half_angle_longitude(X, Y)
    h = (k + e2 - 1.0) / k * slant

    pole = rho < POLE_EPSILON_M
    phi = np.where(pole, np.copysign(0.5 * math.pi, Z), phi)
    h = np.where(pole, np.abs(Z) - datum.b, h)
    return np.column_stack([phi, lam, h])


def enu_rotation(origin):
    # type: (GeodeticCoord) -> np.ndarray
    '''Rows are the east, north and up unit vectors at `origin`, in ECEF.'''
    sin_phi, cos_phi = math.sin(origin.phi), math.cos(origin.phi)
    sin_lam, cos_lam = math.sin(origin.lam), math.cos(origin.lam)
    return np.array([[-sin_lam, cos_lam, 0.0],
                     [-sin_phi * cos_lam, -sin_phi * sin_lam, cos_phi],
                     [cos_phi * cos_lam, cos_phi * sin_lam, sin_phi]])


def enu_to_ecef_array(enu, origin, datum=WGS84):
    # type: (np.ndarray, GeodeticCoord, Wgs84) -> np.ndarray
    enu = _triples(enu, 'ENU coordinates')
    return geodetic_to_ecef_array(origin.as_array(), datum) + enu @ enu_rotation(origin)


def ecef_to_enu_array(ecef, origin, datum=WGS84):
    # type: (np.ndarray, GeodeticCoord, Wgs84) -> np.ndarray
    ecef = _triples(ecef, 'ECEF coordinates')
    return (ecef - geodetic_to_ecef_array(origin.as_array(), datum)) @ enu_rotation(origin).T


def enu_to_geodetic_array(enu, origin, datum=WGS84):
    # type: (np.ndarray, GeodeticCoord, Wgs84) -> np.ndarray
    return ecef_to_geodetic_array(enu_to_ecef_array(enu, origin, datum), datum)


def geodetic_to_enu_array(geodetic, origin, datum=WGS84):
    # type: (np.ndarray, GeodeticCoord, Wgs84) -> np.ndarray
    return ecef_to_enu_array(geodetic_to_ecef_array(geodetic, datum), origin, datum)


def geodetic_to_ecef(g, datum=WGS84):
    # type: (GeodeticCoord, Wgs84) -> EcefCoord
    return EcefCoord(*geodetic_to_ecef_array(g.as_array(), datum)[0])


def ecef_to_geodetic(c, datum=WGS84):
    # type: (EcefCoord, Wgs84) -> GeodeticCoord
    return GeodeticCoord(*ecef_to_geodetic_array(c.as_array(), datum)[0])


def enu_to_ecef(p, origin, datum=WGS84):
    # type: (EnuCoord, GeodeticCoord, Wgs84) -> EcefCoord
    return EcefCoord(*enu_to_ecef_array(p.as_array(), origin, datum)[0])


def ecef_to_enu(c, origin, datum=WGS84):
    # type: (EcefCoord, GeodeticCoord, Wgs84) -> EnuCoord
    return EnuCoord(*ecef_to_enu_array(c.as_array(), origin, datum)[0])


def enu_to_geodetic(p, origin, datum=WGS84):
    # type: (EnuCoord, GeodeticCoord, Wgs84) -> GeodeticCoord
    return ecef_to_geodetic(enu_to_ecef(p, origin, datum), datum)


def geodetic_to_enu(g, origin, datum=WGS84):
    # type: (GeodeticCoord, GeodeticCoord, Wgs84) -> EnuCoord
    return ecef_to_enu(geodetic_to_ecef(g, datum), origin, datum)
