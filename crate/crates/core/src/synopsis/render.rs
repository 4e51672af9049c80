use crate::error::{Error, Result};
use crate::video_io::Frame;

use super::Placement;

pub const GLYPH_WIDTH: usize = 3;
pub const GLYPH_HEIGHT: usize = 5;
const ADVANCE: usize = GLYPH_WIDTH + 1;

// 3x5 bitmaps, one row per entry, MSB = leftmost column.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];
const COLON: [u8; 5] = [0b000, 0b010, 0b000, 0b010, 0b000];

fn glyph(c: char) -> Option<&'static [u8; 5]> {
    match c {
        '0'..='9' => Some(&DIGITS[c as usize - '0' as usize]),
        ':' => Some(&COLON),
        _ => None,
    }
}

/// `hh:mm:ss` of a stream offset; hours are not wrapped.
pub fn format_clock(ms: u64) -> String {
    let s = ms / 1000;
    format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

pub fn text_width(text: &str) -> usize {
    (text.chars().count() * ADVANCE).saturating_sub(1)
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to the frame.
/// Characters without a glyph leave a blank cell.
pub fn draw_text(pixels: &mut [u8], width: usize, height: usize, channels: usize, x: usize, y: usize, text: &str) {
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x + i * ADVANCE;
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..GLYPH_WIDTH {
                if row & (1 << (GLYPH_WIDTH - 1 - rx)) == 0 {
                    continue;
                }
                let (px, py) = (gx + rx, y + ry);
                if px < width && py < height {
                    let at = (py * width + px) * channels;
                    pixels[at..at + channels].fill(255);
                }
            }
        }
    }
}

/// Composites every placement's masked patch over a copy of `background`
/// at its original box, then writes its time label just above the box (or
/// below it when there is no room).
pub fn render_synopsis_frame(placements: &[Placement], background: &Frame) -> Result<Frame> {
    let (w, h, c) = (background.width(), background.height(), background.channels());
    let mut pixels = background.pixels().to_vec();
    for p in placements {
        if !p.bbox.fits_in(w, h) {
            return Err(Error::OutOfBounds(p.bbox));
        }
        let src = p.source();
        if src.image_patch.len() != p.bbox.area() * c || src.mask_patch.len() != p.bbox.area() {
            return Err(Error::Geometry(format!(
                "patch of object {} does not match box {:?} with {c} channels",
                p.object_id, p.bbox
            )));
        }
        for y in 0..p.bbox.h {
            let dst_row = ((p.bbox.y + y) * w + p.bbox.x) * c;
            for x in 0..p.bbox.w {
                if src.mask_patch[y * p.bbox.w + x] == 0 {
                    continue;
                }
                let s = (y * p.bbox.w + x) * c;
                pixels[dst_row + x * c..dst_row + (x + 1) * c].copy_from_slice(&src.image_patch[s..s + c]);
            }
        }
    }
    for p in placements {
        let y = if p.bbox.y > GLYPH_HEIGHT {
            p.bbox.y - GLYPH_HEIGHT - 1
        } else {
            p.bbox.bottom() + 1
        };
        draw_text(&mut pixels, w, h, c, p.bbox.x, y, &p.label_text);
    }
    Frame::new(
        placements.first().map_or(0, |p| p.synopsis_frame_index),
        background.timestamp_ms(),
        w,
        h,
        c,
        pixels,
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::BBox;
    use crate::tracker::{ObjectFrame, Tube};

    fn placement(id: u32, bbox: BBox, value: u8, label: &str) -> Placement {
        let tube = Tube {
            object_id: id,
            frames: vec![ObjectFrame {
                original_frame_index: 0,
                original_timestamp_ms: 0,
                bbox,
                image_patch: vec![value; bbox.area()],
                mask_patch: vec![1; bbox.area()],
                predicted: false,
            }],
            start_timestamp_ms: 0,
        };
        Placement {
            object_id: id,
            tube: Arc::new(tube),
            frame_pos: 0,
            bbox,
            synopsis_frame_index: 3,
            label_text: label.into(),
        }
    }

    fn bg() -> Frame {
        Frame::filled(0, 0, 64, 48, &[40]).unwrap()
    }

    #[test]
    fn clock_format() {
        assert_eq!(format_clock(0), "00:00:00");
        assert_eq!(format_clock(3_723_999), "01:02:03");
        assert_eq!(text_width("00:00:00"), 31);
    }

    #[test]
    fn no_placements_is_identity() {
        let out = render_synopsis_frame(&[], &bg()).unwrap();
        assert_eq!(out.pixels(), bg().pixels());
    }

    #[test]
    fn single_placement_changes_only_its_box() {
        let b = BBox::new(10, 20, 8, 6);
        let out = render_synopsis_frame(&[placement(1, b, 200, "")], &bg()).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let v = out.pixel(x, y)[0];
                assert_eq!(v != 40, b.contains(x, y), "({x},{y})");
            }
        }
        assert_eq!(out.index(), 3);
    }

    #[test]
    fn two_placements_match_sequential_pasting() {
        let a = placement(1, BBox::new(2, 10, 10, 10), 200, "00:00:01");
        let b = placement(2, BBox::new(30, 30, 6, 9), 90, "00:00:02");
        let out = render_synopsis_frame(&[a.clone(), b.clone()], &bg()).unwrap();
        // Naive compositor: paste one at a time, then labels.
        let mut naive = bg().pixels().to_vec();
        for p in [&a, &b] {
            for y in p.bbox.y..p.bbox.bottom() {
                for x in p.bbox.x..p.bbox.right() {
                    naive[y * 64 + x] = p.source().image_patch[0];
                }
            }
        }
        draw_text(&mut naive, 64, 48, 1, 2, 4, "00:00:01");
        draw_text(&mut naive, 64, 48, 1, 30, 24, "00:00:02");
        assert_eq!(out.pixels(), &naive[..]);
    }

    #[test]
    fn box_outside_background_is_an_error() {
        let p = placement(1, BBox::new(60, 40, 10, 10), 1, "");
        assert!(matches!(render_synopsis_frame(&[p], &bg()), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn label_goes_below_when_box_touches_top() {
        let p = placement(1, BBox::new(0, 0, 8, 8), 40, "1");
        let out = render_synopsis_frame(&[p], &bg()).unwrap();
        // Digit "1" top row is 010: pixel (1, 9) is lit.
        assert_eq!(out.pixel(1, 9)[0], 255);
    }
}
