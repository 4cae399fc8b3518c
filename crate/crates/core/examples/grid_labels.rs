//! Builds a grid, labels one window and matches a detection to an incident.

use crome::data::{BoundingBox, Incident};
use crome::grid::{bin_time, geodesic_km, make_grid, unproject, CellIndex};
use crome::labels::{match_detections, Detection, Labeler, MatchRule};

fn main() -> crome::Result<()> {
    let (lat0, lon0) = (36.05, -86.95);
    let region = BoundingBox::from_origin_km(lat0, lon0, 10.0, 10.0);
    let grid = make_grid(&region, 1.0)?;
    println!("{}x{} cells of 1 km", grid.nx, grid.ny);

    let (lat, lon) = unproject(lat0, lon0, 4.3, 6.8);
    let cell = grid.locate(lat, lon)?;
    let centre = grid.cell_center(cell)?;
    println!("incident falls in {cell:?}, {:.3} km from the cell centre", geodesic_km((lat, lon), centre));

    let t0 = 0;
    let incident = Incident { id: "i1".into(), time: t0 + 50 * 60, lat, lon };
    let rule = MatchRule { alpha_min: 30.0, beta_min: 15.0, delta_km: 1.0 };
    let labeler = Labeler::new(grid, rule);
    let end = bin_time(t0 + 40 * 60, 5, t0)?;
    let labels = labeler.label(std::slice::from_ref(&incident), end);
    let positives: Vec<CellIndex> = labels.positives().map(|i| grid.unflat(i)).collect();
    println!("window ending at bin {} has {} positive cells: {positives:?}", end.index, positives.len());

    let detection = Detection { bin: end, cells: vec![cell] };
    for m in match_detections(&[detection], &[incident], &grid, &rule) {
        println!("{} matched {:.1} min early at {:.3} km", m.incident_id, m.lead_minutes, m.distance_km);
    }
    Ok(())
}
