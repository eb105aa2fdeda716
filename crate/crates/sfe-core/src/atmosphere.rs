//! Standard atmosphere in imperial units (ft, slug, s, lbf).
//!
//! Two-layer model: linear temperature lapse up to the tropopause at
//! 36089.24 ft, isothermal above. Everything downstream keys Mach and
//! dynamic pressure off these curves.

/// Sea-level temperature, deg Rankine.
const T0: f64 = 518.67;
/// Tropospheric lapse rate, deg R per ft.
const LAPSE: f64 = 0.0035662;
/// Sea-level speed of sound, ft/s.
const A0: f64 = 1116.45;
/// Sea-level density, slug/ft^3.
const RHO0: f64 = 0.0023769;
/// Geopotential altitude of the tropopause, ft.
const H_TROP: f64 = 36089.24;
/// g / (L R) for the density power law.
const G_OVER_LR: f64 = 32.17405 / (LAPSE * 1716.49);
/// Isothermal-layer density decay length, ft.
const H_SCALE: f64 = 20806.7;

fn theta(h: f64) -> f64 {
    let h_eff = h.min(H_TROP);
    (T0 - LAPSE * h_eff) / T0
}

/// Speed of sound at altitude `h` ft, in ft/s.
pub fn speed_of_sound(h: f64) -> f64 {
    A0 * theta(h).sqrt()
}

/// Air density at altitude `h` ft, in slug/ft^3.
pub fn density(h: f64) -> f64 {
    let th = theta(h);
    let sigma_trop = th.powf(G_OVER_LR - 1.0);
    if h <= H_TROP {
        RHO0 * sigma_trop
    } else {
        RHO0 * sigma_trop * (-(h - H_TROP) / H_SCALE).exp()
    }
}

/// Mach number for ground speed `vg` ft/s at altitude `h` ft.
pub fn mach(vg: f64, h: f64) -> f64 {
    vg / speed_of_sound(h)
}

/// Dynamic pressure q = rho V^2 / 2, in lbf/ft^2.
pub fn dynamic_pressure(vg: f64, h: f64) -> f64 {
    0.5 * density(h) * vg * vg
}
