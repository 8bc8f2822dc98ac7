use plotters::prelude::*;

use grounding_kit::bench::SweepRow;

/// Line plot of oIoU and mIoU against the swept parameter, as SVG text.
pub fn sweep_svg(axis: &str, rows: &[SweepRow]) -> anyhow::Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let x_max = rows.iter().map(|r| r.value).fold(0.0, f64::max).max(1.0);
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("sweep over {axis}"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..x_max, 0.0..1.0)?;
        chart.configure_mesh().x_desc(axis).y_desc("IoU").draw()?;
        let series = [("oIoU", RED), ("mIoU", BLUE)];
        for (name, color) in series {
            let points = rows.iter().map(|r| {
                let y = if name == "oIoU" {
                    r.summary.oiou
                } else {
                    r.summary.miou
                };
                (r.value, y)
            });
            chart
                .draw_series(LineSeries::new(points, color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()?;
        root.present()?;
    }
    Ok(svg)
}
