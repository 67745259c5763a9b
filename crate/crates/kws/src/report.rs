//! Human-readable and JSON renderings of an [`EvalReport`].

use std::fmt::Write;

use kws_core::eval::EvalReport;

pub fn report_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("reports always serialise");
    s.push('\n');
    s
}

pub fn report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    writeln!(s, "samples   {}", r.samples).unwrap();
    writeln!(s, "accuracy  {:.4}", r.accuracy).unwrap();
    match &r.frr_at_far {
        Some(f) => writeln!(
            s,
            "frr       {:.4} at far {:.4} (target {}, threshold {:.6})",
            f.frr, f.far, f.far_target, f.threshold
        )
        .unwrap(),
        None => writeln!(s, "frr       n/a (split lacks keyword or non-keyword samples)").unwrap(),
    }
    let width = r.classes.iter().map(String::len).max().unwrap_or(5).max(5);
    writeln!(s, "\nper-class accuracy").unwrap();
    for (name, acc) in r.classes.iter().zip(&r.per_class_accuracy) {
        match acc {
            Some(a) => writeln!(s, "  {name:<width$}  {a:.4}").unwrap(),
            None => writeln!(s, "  {name:<width$}  -").unwrap(),
        }
    }
    let row_names: Vec<String> = r.classes.iter().enumerate().map(|(i, n)| format!("{i}:{n}")).collect();
    let width = row_names.iter().map(String::len).max().unwrap_or(0).max(width);
    let cell = r.confusion.iter().flatten().max().map_or(1, |m| m.to_string().len()).max(3);
    writeln!(s, "\nconfusion (rows true, columns predicted)").unwrap();
    write!(s, "  {:<width$}", "").unwrap();
    for i in 0..r.classes.len() {
        write!(s, " {i:>cell$}").unwrap();
    }
    writeln!(s).unwrap();
    for (name, row) in row_names.iter().zip(&r.confusion) {
        write!(s, "  {name:<width$}").unwrap();
        for v in row {
            write!(s, " {v:>cell$}").unwrap();
        }
        writeln!(s).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use kws_core::data::LabelMap;
    use kws_core::eval::{report, ScoredSample};

    use super::*;

    fn sample() -> EvalReport {
        let labels = LabelMap::custom(&["a", "b"]).unwrap();
        let s = |c: usize, sc: [f64; 4]| ScoredSample { true_class: c, scores: sc.to_vec() };
        let samples = vec![
            s(0, [0.9, 0.1, 0.1, 0.1]),
            s(1, [0.2, 0.8, 0.1, 0.1]),
            s(2, [0.1, 0.1, 0.7, 0.1]),
            s(3, [0.1, 0.6, 0.1, 0.2]),
        ];
        report(&samples, &labels, 0.5).unwrap()
    }

    #[test]
    fn json_round_trips() {
        let r = sample();
        let back: EvalReport = serde_json::from_str(&report_json(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn text_lists_everything() {
        let t = report_text(&sample());
        assert!(t.contains("accuracy  0.7500"), "{t}");
        assert!(t.contains("frr "), "{t}");
        assert!(t.contains("3:silence"), "{t}");
        let rows = t.lines().filter(|l| l.trim_start().split(':').next().is_some_and(|p| p.parse::<usize>().is_ok()));
        assert_eq!(rows.count(), 4);
    }
}
