//! Small fixtures shared by unit tests.

use crate::battery::{AgingCondition, BatteryFormat, Cycle, TimePoint};

pub fn condition(tag: &str) -> AgingCondition {
    AgingCondition {
        battery_format: BatteryFormat::Cylindrical,
        anode: "graphite".into(),
        cathode: "LFP".into(),
        electrolyte: "LiPF6".into(),
        charge_protocol: format!("cc-{tag}"),
        discharge_protocol: "cc-1C".into(),
        temperature: 25.0,
        nominal_capacity: 1.1,
        manufacturer: "acme".into(),
    }
}

/// A cycle with constant-current halves whose discharge delivers `capacity` Ah.
pub fn simple_cycle(index: u32, capacity: f64) -> Cycle {
    let n = 6;
    let dur = capacity * 3600.0;
    let t: Vec<f64> = (0..n).map(|k| dur * k as f64 / (n - 1) as f64).collect();
    let v_ch: Vec<f64> = (0..n).map(|k| 3.0 + 0.2 * k as f64).collect();
    let v_dis: Vec<f64> = v_ch.iter().rev().cloned().collect();
    let charge = TimePoint::series(&t, &v_ch, &[1.0; 6]).unwrap();
    let t_dis: Vec<f64> = t.iter().map(|x| x + dur + 60.0).collect();
    let discharge = TimePoint::series(&t_dis, &v_dis, &[-1.0; 6]).unwrap();
    Cycle::from_points(index, charge, discharge).unwrap()
}
