//! `pano-dump`: render a pano snapshot as a binary 8-bit PGM.

use std::io::Read;

use spinodom::pano::{read_snapshot_body, read_snapshot_header, SnapshotError};

/// Near surfaces are bright, far ones dark, empty pixels black. Depths at
/// or beyond `max_range` (default: the largest depth) map to 1.
pub fn snapshot_to_pgm<R: Read>(mut r: R, max_range: Option<f64>) -> Result<Vec<u8>, SnapshotError> {
    let header = read_snapshot_header(&mut r)?;
    let (ticks, _) = read_snapshot_body(&mut r, &header)?;
    let to_m = f64::from(header.meters_per_tick);
    let max = max_range.unwrap_or_else(|| f64::from(ticks.iter().copied().max().unwrap_or(0)) * to_m);
    let mut out = format!("P5\n{} {}\n255\n", header.cols, header.rows).into_bytes();
    out.extend(ticks.iter().map(|&t| {
        if t == 0 {
            0
        } else if max <= 0.0 {
            255
        } else {
            let x = (f64::from(t) * to_m / max).min(1.0);
            (255.0 - 254.0 * x).round() as u8
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spinodom::pano::FusionParams;
    use spinodom::{DepthPano, LidarModel, Pose};

    #[test]
    fn grey_levels_follow_depth() {
        let model = LidarModel::new(2, 8, 0.5, 0.0, 0.1).unwrap();
        let mut pano = DepthPano::new(model, Pose::identity(), FusionParams::default());
        pano.fuse_pixel(0, 0, 2.0);
        pano.fuse_pixel(0, 1, 4.0);
        pano.fuse_pixel(1, 7, 1.0);
        let mut snap = Vec::new();
        pano.write_snapshot(&mut snap).unwrap();
        let pgm = snapshot_to_pgm(snap.as_slice(), None).unwrap();
        let header = b"P5\n8 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[128, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 192]);
    }
}
