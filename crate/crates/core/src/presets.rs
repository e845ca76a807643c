//! Bench constants, converted to SI at definition.
//!
//! Passive components, gains and the open-circuit voltage mirror the test
//! bench's parameter table; operating points listed under "reported" are the
//! steady states identified on hardware and are used as reproduction targets.

/// Output capacitor, 136 µF.
pub const C: f64 = 136.0e-6;
/// Fuel-cell coupling capacitor, 5.19 mF.
pub const C_FC: f64 = 5.19e-3;
/// Converter inductance, 38.6 µH.
pub const L: f64 = 38.6e-6;
/// Nominal inductor parasitic resistance, 8.30 mΩ.
pub const THETA_R1: f64 = 8.30e-3;
/// Nominal load conductances, 47.1 mS and 94.2 mS.
pub const THETA_R2_LOW: f64 = 47.1e-3;
pub const THETA_R2_HIGH: f64 = 94.2e-3;
/// Switching frequency, 100 kHz. Metadata only: the plant model is averaged.
pub const F_SW: f64 = 100.0e3;
/// Open-circuit voltage measured before the session, 38.84 V.
pub const E_OC: f64 = 38.84;

pub const K1: f64 = 2.00;
pub const K2: f64 = 2.00;
pub const KP: f64 = 19.0e-6;
pub const KI: f64 = 0.28;
pub const LAMBDA: f64 = 4.50;
pub const GAMMA: f64 = 3.00;

/// Controller sample time of the bench, 100 µs.
pub const DT: f64 = 100.0e-6;

/// Averaged polarization-curve parameters identified during the reference
/// pulsing run.
pub const THETA_S1: f64 = 0.984;
pub const THETA_S2: f64 = 0.865;

/// Lumped series loss resistance identified at the 48 V / 90.85 mS operating
/// point (542.31 mΩ). It absorbs switch, diode and ESR losses the averaged
/// model does not carry separately, and is the plant value used by the
/// scenario presets.
pub const THETA_R1_LUMPED: f64 = 542.31e-3;

/// Reference pulsing: 48 V <-> 38 V at 1 Hz with a constant 90.15 mS load.
pub const VREF_HIGH: f64 = 48.0;
pub const VREF_LOW: f64 = 38.0;
pub const VREF_PULSE_LOAD: f64 = 90.15e-3;

/// Load pulsing: 90.87 mS <-> 46.54 mS at 1 Hz with a 48 V reference.
pub const LOAD_PULSE_HIGH: f64 = 90.87e-3;
pub const LOAD_PULSE_LOW: f64 = 46.54e-3;
pub const LOAD_PULSE_VREF: f64 = 48.0;

pub const PULSE_FREQUENCY: f64 = 1.0;

/// Identified steady states, as (theta_r1 Ω, theta_r2 S, x3* V, x1* V, x2* A).
pub mod reported {
    pub const VREF_48: (f64, f64, f64, f64, f64) = (542.31e-3, 90.85e-3, 48.0, 33.32, 7.11);
    pub const VREF_38: (f64, f64, f64, f64, f64) = (978.28e-3, 89.50e-3, 38.0, 35.75, 4.05);
    pub const LOAD_HIGH: (f64, f64, f64, f64, f64) = (536.18e-3, 90.87e-3, 48.0, 33.12, 7.15);
    pub const LOAD_LOW: (f64, f64, f64, f64, f64) = (1.22, 46.54e-3, 48.0, 36.29, 3.31);
}

#[cfg(test)]
mod tests {
    use super::*;

    // Cross-check against the table in its original units.
    #[test]
    fn table_values_in_original_units() {
        let cases = [
            (C * 1e6, 136.0),
            (C_FC * 1e3, 5.19),
            (L * 1e6, 38.6),
            (THETA_R1 * 1e3, 8.30),
            (THETA_R2_LOW * 1e3, 47.1),
            (THETA_R2_HIGH * 1e3, 94.2),
            (F_SW * 1e-3, 100.0),
            (E_OC, 38.84),
            (K1, 2.0),
            (K2, 2.0),
            (KP * 1e6, 19.0),
            (KI, 0.28),
            (LAMBDA, 4.5),
            (GAMMA, 3.0),
            (DT * 1e6, 100.0),
            (VREF_PULSE_LOAD * 1e3, 90.15),
            (LOAD_PULSE_HIGH * 1e3, 90.87),
            (LOAD_PULSE_LOW * 1e3, 46.54),
        ];
        for (i, (got, want)) in cases.iter().enumerate() {
            assert!((got - want).abs() <= 1e-12 * want.abs(), "entry {i}: {got} != {want}");
        }
    }
}
