//! SVG plots for run directories: ROC curve, confusion matrix, accuracy
//! bars and the clip-length by neighborhood sweep.

use eyecue_core::train::metrics::{Confusion, RocPoint};
use plotters::prelude::*;

use crate::error::{CliError, CliResult};

const SIZE: (u32, u32) = (640, 480);

fn draw<F>(body: F) -> CliResult<String>
where
    F: FnOnce(DrawingArea<SVGBackend<'_>, plotters::coord::Shift>) -> Result<(), Box<dyn std::error::Error + '_>>,
{
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(CliError::internal)?;
        body(root.clone()).map_err(|e| CliError::internal(e.to_string()))?;
        root.present().map_err(CliError::internal)?;
    }
    Ok(out)
}

pub fn roc_svg(points: &[RocPoint], auc: Option<f64>) -> CliResult<String> {
    let caption = match auc {
        Some(a) => format!("ROC (AUC {a:.3})"),
        None => "ROC (undefined: one class)".to_string(),
    };
    draw(|root| {
        let mut chart = ChartBuilder::on(&root)
            .caption(caption, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)?;
        chart
            .configure_mesh()
            .x_desc("false positive rate")
            .y_desc("true positive rate")
            .draw()?;
        chart.draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], &RGBColor(180, 180, 180)))?;
        chart.draw_series(LineSeries::new(points.iter().map(|p| (p.fpr, p.tpr)), &BLUE))?;
        Ok(())
    })
}

/// 2x2 grid, rows = true class, columns = predicted class.
pub fn confusion_svg(c: &Confusion) -> CliResult<String> {
    let cells = [(0, 0, c.tn), (0, 1, c.fp), (1, 0, c.fn_), (1, 1, c.tp)];
    let classes = ["attentive", "distracted"];
    let max = cells.iter().map(|x| x.2).max().unwrap_or(0).max(1) as f64;
    draw(|root| {
        let mut chart = ChartBuilder::on(&root)
            .caption("confusion (rows: true, columns: predicted)", ("sans-serif", 18))
            .margin(10)
            .build_cartesian_2d(-0.8f64..2f64, 0f64..2.3f64)?;
        for &(row, col, count) in &cells {
            let (x0, y0) = (col as f64, 1.0 - row as f64);
            let shade = 255 - (200.0 * count as f64 / max) as u8;
            chart.draw_series(std::iter::once(Rectangle::new(
                [(x0, y0), (x0 + 1.0, y0 + 1.0)],
                RGBColor(shade, shade, 255).filled(),
            )))?;
            chart.draw_series(std::iter::once(Text::new(
                count.to_string(),
                (x0 + 0.45, y0 + 0.55),
                ("sans-serif", 24),
            )))?;
        }
        for (k, name) in classes.iter().enumerate() {
            chart.draw_series(std::iter::once(Text::new(
                name.to_string(),
                (k as f64 + 0.35, 2.2),
                ("sans-serif", 16),
            )))?;
            chart.draw_series(std::iter::once(Text::new(
                name.to_string(),
                (-0.75, 1.55 - k as f64),
                ("sans-serif", 16),
            )))?;
        }
        Ok(())
    })
}

/// Accuracy per labeled configuration, in percent.
pub fn bars_svg(title: &str, bars: &[(String, f64)]) -> CliResult<String> {
    let n = bars.len().max(1);
    draw(|root| {
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..n as f64, 0f64..100f64)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n + 1)
            .x_label_formatter(&|v| {
                let i = (v - 0.5).round();
                if (v - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                    bars.get(i as usize).map(|b| b.0.clone()).unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("accuracy (%)")
            .draw()?;
        chart.draw_series(bars.iter().enumerate().map(|(i, (_, acc))| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *acc)], BLUE.mix(0.6).filled())
        }))?;
        Ok(())
    })
}

/// One line per clip length over the neighborhood sizes.
pub fn sweep_svg(series: &[(usize, Vec<(usize, f64)>)]) -> CliResult<String> {
    let max_h = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .max()
        .unwrap_or(1) as f64;
    draw(|root| {
        let mut chart = ChartBuilder::on(&root)
            .caption("accuracy by neighborhood size", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..max_h + 1.0, 0f64..100f64)?;
        chart
            .configure_mesh()
            .x_desc("patches per frame (h)")
            .y_desc("accuracy (%)")
            .draw()?;
        for (k, (frames, points)) in series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().map(|&(h, a)| (h as f64, a)), color))?
                .label(format!("{frames} frames"))
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_svg_documents() {
        let roc = [
            RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 },
            RocPoint { threshold: 0.5, fpr: 0.2, tpr: 0.7 },
            RocPoint { threshold: 0.0, fpr: 1.0, tpr: 1.0 },
        ];
        let c = Confusion { tp: 167, fn_: 75, fp: 49, tn: 193 };
        for svg in [
            roc_svg(&roc, Some(0.8)).unwrap(),
            confusion_svg(&c).unwrap(),
            bars_svg("ablation", &[("G".into(), 50.0), ("G+V+Q".into(), 90.0)]).unwrap(),
            sweep_svg(&[(8, vec![(1, 80.0), (5, 75.0)]), (16, vec![(1, 85.0), (5, 70.0)])]).unwrap(),
        ] {
            assert!(svg.starts_with("<svg"), "{}", &svg[..40.min(svg.len())]);
            assert!(svg.trim_end().ends_with("</svg>"));
        }
        let svg = confusion_svg(&c).unwrap();
        for text in ["193", "167", "attentive", "distracted"] {
            assert!(svg.contains(text), "{text}");
        }
    }
}
