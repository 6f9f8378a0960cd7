mod common;

use std::io::Cursor;

use nearmiss_core::clipio::{
    frame_file_name, mask_file_name, parse_manifest, read_frame, read_mask, write_frame_pgm,
    write_manifest, write_mask_pgm, ClipRecord, Frame, SemanticMask, Split,
};
use nearmiss_core::classifier::IncidentClass;
use nearmiss_core::featuremaps::{read_map_file, write_map_file, FeatureMap, Layer};
use nearmiss_core::grid::Grid;
use nearmiss_core::semanticflow::{ChannelTag, SemanticClass};
use nearmiss_core::tddpool::{DescLayer, DescriptorSet};
use nearmiss_core::Error;

#[test]
fn sequence_file_names() {
    assert_eq!(frame_file_name(7, "png"), "frame_000007.png");
    assert_eq!(mask_file_name(123456, "pgm"), "mask_123456.pgm");
}

#[test]
fn tensor_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = FeatureMap::<f32>::zeros(Layer::Tem3, 1.0, 2, 3, 4, 5, 0.25);
    for (i, v) in m.data.iter_mut().enumerate() {
        *v = i as f32 * 0.5;
    }
    let path = dir.path().join("map_000000.sfm");
    write_map_file(&path, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"SFM1|tem3|4|5|2|3|0.25\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 2 * 3 * 4 * 5 * 4);
    // frame 1, channel 0, pixel (0,0) follows the 2 channels of frame 0
    let off = header.len() + (2 * 20) * 4;
    assert_eq!(&bytes[off..off + 4], m.get(1, 0, 0, 0).to_le_bytes());
    assert_eq!(read_map_file(&path, 1.0).unwrap(), m);
}

#[test]
fn descriptor_dump_layout() {
    let mut set = DescriptorSet::<f32>::new(DescLayer::Tdd(Layer::Spa5), ChannelTag::Fg(SemanticClass::Pedestrian), 3);
    set.push(&[1.0, 2.0, 3.0]).unwrap();
    set.push(&[4.0, 5.0, 6.0]).unwrap();
    assert!(set.push(&[1.0]).is_err());
    let mut bytes = Vec::new();
    set.write_dump(&mut bytes).unwrap();
    let header = b"SFD1|spa5|3|2|fg_ped\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[bytes.len() - 4..], 6.0f32.to_le_bytes());
    let back = DescriptorSet::<f32>::read_dump(&mut Cursor::new(&bytes), "t").unwrap();
    assert_eq!(back, set);
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(DescriptorSet::<f32>::read_dump(&mut Cursor::new(&extra), "t").is_err());

    let empty = DescriptorSet::<f32>::new(DescLayer::IdtMbh, ChannelTag::Bg, 192);
    let mut bytes = Vec::new();
    empty.write_dump(&mut bytes).unwrap();
    assert_eq!(bytes, b"SFD1|idt_mbh|192|0|bg\n");
}

#[test]
fn manifest_roundtrip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |id: &str| ClipRecord {
        clip_id: id.into(),
        frame_dir: "clips/a/frames".into(),
        mask_dir: Some("clips/a/masks".into()),
        label: IncidentClass::HighVehicle,
        split: Split::Train,
        ttc: Some(0.3),
    };
    let path = dir.path().join("m.jsonl");
    write_manifest(&[rec("a"), rec("b")], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.ends_with('\n'));
    assert_eq!(parse_manifest(Cursor::new(text.as_bytes())).unwrap(), vec![rec("a"), rec("b")]);
    assert!(matches!(write_manifest(&[rec("a"), rec("a")], &path), Err(Error::DuplicateClip(_))));
    let bad = "{\"clip_id\":\"x\",\"frame_dir\":\"f\",\"mask_dir\":null,\"label\":\"nope\",\"split\":\"train\",\"ttc\":null}\n";
    assert!(matches!(parse_manifest(Cursor::new(bad)), Err(Error::Manifest { line: 1, .. })));
}

#[test]
fn frames_and_masks_roundtrip_through_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::from_fn(40, 36, |x, y| ((x * 3 + y * 5) % 256) as f32 / 255.0);
    let frame = Frame::new(g).unwrap();
    let fp = dir.path().join(frame_file_name(0, "pgm"));
    write_frame_pgm(&fp, &frame).unwrap();
    let back = read_frame(&fp).unwrap();
    for (a, b) in back.grid().data().iter().zip(frame.grid().data()) {
        assert!((a - b).abs() < 1.0 / 255.0);
    }
    let mask = SemanticMask::new(Grid::from_fn(40, 36, |x, _| (x % 4) as u8)).unwrap();
    let mp = dir.path().join(mask_file_name(0, "pgm"));
    write_mask_pgm(&mp, &mask).unwrap();
    assert_eq!(read_mask(&mp).unwrap(), mask);
    assert!(SemanticMask::new(Grid::filled(4, 4, 9u8)).is_err());
}
