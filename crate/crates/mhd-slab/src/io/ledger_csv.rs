//! CSV emission of ledger time series.
//!
//! Column order is part of the format contract and stable within a major
//! version; downstream plotting relies on it. Values use the shortest
//! decimal form that round-trips to the same f64.

use std::io::Write;
use std::path::Path;

use crate::conormal::EnergyLedger;
use crate::error::MhdError;
use crate::Result;

pub const LEDGER_COLUMNS: [&str; 18] = [
    "t",
    "E_tan_m1",
    "E_tan_m",
    "E_m1",
    "E_m",
    "D_tan_m1",
    "D_tan_m",
    "D_m1",
    "D_m",
    "E_full",
    "D_full",
    "neg_u_b",
    "neg_w",
    "cross_phi1",
    "cross_phi2",
    "cross_phi3",
    "l2_energy",
    "l2_dissipation",
];

fn row(l: &EnergyLedger) -> [f64; 18] {
    [
        l.t,
        l.e_tan_m1,
        l.e_tan_m,
        l.e_m1,
        l.e_m,
        l.d_tan_m1,
        l.d_tan_m,
        l.d_m1,
        l.d_m,
        l.e_full,
        l.d_full,
        l.neg_u_b,
        l.neg_w,
        l.cross_phi1,
        l.cross_phi2,
        l.cross_phi3,
        l.l2_energy,
        l.l2_dissipation,
    ]
}

fn from_row(r: [f64; 18]) -> EnergyLedger {
    EnergyLedger {
        t: r[0],
        e_tan_m1: r[1],
        e_tan_m: r[2],
        e_m1: r[3],
        e_m: r[4],
        d_tan_m1: r[5],
        d_tan_m: r[6],
        d_m1: r[7],
        d_m: r[8],
        e_full: r[9],
        d_full: r[10],
        neg_u_b: r[11],
        neg_w: r[12],
        cross_phi1: r[13],
        cross_phi2: r[14],
        cross_phi3: r[15],
        l2_energy: r[16],
        l2_dissipation: r[17],
    }
}

fn csv_err(e: csv::Error) -> MhdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MhdError::Io(io),
        other => MhdError::CorruptPayload(format!("csv: {other:?}")),
    }
}

pub fn write_ledger_csv_to<W: Write>(w: W, rows: &[EnergyLedger]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(LEDGER_COLUMNS).map_err(csv_err)?;
    for l in rows {
        wtr.write_record(row(l).iter().map(|x| x.to_string()))
            .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_ledger_csv<P: AsRef<Path>>(path: P, rows: &[EnergyLedger]) -> Result<()> {
    write_ledger_csv_to(std::fs::File::create(path)?, rows)
}

pub fn read_ledger_csv<P: AsRef<Path>>(path: P) -> Result<Vec<EnergyLedger>> {
    let mut rdr = csv::Reader::from_reader(std::fs::File::open(path)?);
    let header = rdr.headers().map_err(csv_err)?;
    if header != LEDGER_COLUMNS.as_slice() {
        return Err(MhdError::CorruptPayload(format!(
            "unexpected ledger columns {header:?}"
        )));
    }
    let mut out = Vec::new();
    for record in rdr.deserialize::<[f64; 18]>() {
        out.push(from_row(record.map_err(csv_err)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_field() {
        let mk = |base: f64| {
            let mut r = [0.0; 18];
            for (i, v) in r.iter_mut().enumerate() {
                // Awkward decimals exercise the round-trip formatting.
                *v = base + i as f64 * 0.1 + 1.0 / 3.0;
            }
            from_row(r)
        };
        let rows = vec![mk(0.0), mk(1.0), mk(2.0)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        write_ledger_csv(&path, &rows).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,E_tan_m1,E_tan_m,E_m1,E_m,D_tan_m1,"));
        assert_eq!(text.lines().count(), 4);

        let back = read_ledger_csv(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(row(a), row(b));
        }
    }
}
