//! CODATA 2018 exact / recommended values in SI units.

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const HBAR: f64 = PLANCK / (2.0 * std::f64::consts::PI);
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const NUCLEAR_MAGNETON: f64 = 5.050_783_739_3e-27;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
