use std::io::Write;
use std::path::Path;

use super::RunRecord;
use crate::error::{Error, Result};
use crate::peft::DesignSpec;

pub const CSV_HEADER: [&str; 14] = [
    "config_hash",
    "method",
    "functional_form",
    "insertion_form",
    "modified_representation",
    "composition",
    "bottleneck",
    "seed",
    "tunable_params",
    "rel_percent",
    "final_metric",
    "steps",
    "wall_seconds",
    "status",
];

/// Joins one field over all specs with `+`; `-` when there are none.
fn joined(specs: &[DesignSpec], f: impl Fn(&DesignSpec) -> String) -> String {
    if specs.is_empty() {
        "-".into()
    } else {
        specs.iter().map(f).collect::<Vec<_>>().join("+")
    }
}

fn row(r: &RunRecord) -> [String; 14] {
    let s = &r.specs;
    let bottleneck = match (s.is_empty(), r.extra_bottleneck) {
        (false, _) => joined(s, |d| d.bottleneck.to_string()),
        (true, 0) => "-".into(),
        (true, l) => l.to_string(),
    };
    [
        r.config_hash.clone(),
        r.method.clone(),
        joined(s, |d| d.functional_form.name().into()),
        joined(s, |d| d.insertion_form.name().into()),
        joined(s, |d| d.modified_representation.name().into()),
        joined(s, |d| match d.composition {
            crate::peft::Composition::ScaledAdd(x) => format!("scaled_add({x})"),
            c => c.name().into(),
        }),
        bottleneck,
        r.seed.to_string(),
        r.tunable_params.to_string(),
        r.rel_percent.to_string(),
        r.final_metric.to_string(),
        r.steps.to_string(),
        format!("{:.3}", r.wall_seconds),
        r.status.label(),
    ]
}

/// Writes the header and one row per record.
pub fn write_csv<W: Write>(records: &[RunRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record(row(r))?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn emit_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(f))
}

/// Long-form metric curves: `config_hash,method,seed,step,metric`.
pub fn emit_curves(records: &[RunRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = csv::Writer::from_writer(std::io::BufWriter::new(f));
    out.write_record(["config_hash", "method", "seed", "step", "metric"])?;
    for r in records {
        for (step, m) in &r.curve {
            out.write_record([
                r.config_hash.clone(),
                r.method.clone(),
                r.seed.to_string(),
                step.to_string(),
                m.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HookPoint;
    use crate::train::RunStatus;

    fn record(specs: Vec<DesignSpec>) -> RunRecord {
        RunRecord {
            config_hash: "abc".into(),
            method: "m".into(),
            specs,
            extra_bottleneck: 0,
            seed: 7,
            tunable_params: 10,
            base_total: 100,
            rel_percent: 10.0,
            curve: vec![(0, 0.1), (5, 0.5)],
            losses: vec![],
            final_metric: 0.5,
            steps: 5,
            wall_seconds: 1.23456,
            status: RunStatus::Failed("loss, NaN".into()),
        }
    }

    #[test]
    fn header_only_when_empty() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn rows_join_specs_and_quote_commas() {
        let specs = vec![
            DesignSpec::prefix(4),
            DesignSpec::scaled_parallel_adapter(HookPoint::FfnSublayerOutput, 16, 4.0),
        ];
        let mut buf = Vec::new();
        write_csv(&[record(specs), record(vec![])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("softmax_bottleneck+relu_bottleneck"));
        assert!(lines[1].contains("gated_add+scaled_add(4)"));
        assert!(lines[1].contains(",4+16,7,10,10,0.5,5,1.235,\"failed: loss, NaN\""));
        assert!(lines[2].starts_with("abc,m,-,-,-,-,-,7,"));
    }
}
