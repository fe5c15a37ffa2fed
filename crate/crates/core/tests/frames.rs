use std::fs;
use std::path::Path;

use vca_core::frames::{frame_file_name, DecoderConfig, SourceKind};
use vca_core::harness::{resolve_video, PathsConfig};
use vca_core::{Error, VideoHandle};

fn image_dir(root: &Path, id: &str, n: u64) {
    let dir = root.join(id);
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        fs::write(dir.join(frame_file_name(i)), format!("jpeg {i}")).unwrap();
    }
    fs::write(dir.join("notes.txt"), "ignored").unwrap();
}

#[test]
fn image_dir_counts_and_fetches() {
    let tmp = tempfile::tempdir().unwrap();
    image_dir(tmp.path(), "clip", 100);
    let v = VideoHandle::image_dir(tmp.path(), "clip", 2.0).unwrap();
    assert_eq!(v.total_frames, 100);
    assert_eq!(v.kind(), SourceKind::ImageDir);
    assert_eq!(v.seconds(50), 25.0);
    let f = v.fetch_frames(&[99, 3]).unwrap();
    assert_eq!(&*f[0].bytes, b"jpeg 99");
    assert_eq!(&*f[1].bytes, b"jpeg 3");
    assert_eq!(f[0].media_type, "image/jpeg");
    assert!(matches!(
        v.fetch_frames(&[100]),
        Err(Error::FrameUnavailable { index: 100 })
    ));
}

#[test]
fn image_dir_missing_file_is_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    image_dir(tmp.path(), "clip", 10);
    let v = VideoHandle::image_dir(tmp.path(), "clip", 1.0).unwrap();
    fs::remove_file(tmp.path().join("clip").join(frame_file_name(4))).unwrap();
    assert!(matches!(
        v.fetch_frames(&[4]),
        Err(Error::FrameUnavailable { index: 4 })
    ));
}

fn fake_decoder(cache: &Path) -> DecoderConfig {
    DecoderConfig {
        command: "printf 'decoded %s from %s' {index} \"$(basename {input})\" > {output}".into(),
        probe: Some("echo 50".into()),
        cache_dir: cache.to_path_buf(),
        frame_rate: 5.0,
    }
}

#[test]
fn decoder_extracts_and_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("my video.mp4");
    fs::write(&input, "not really a video").unwrap();
    let v =
        VideoHandle::decoder(&input, "vid", None, fake_decoder(&tmp.path().join("cache"))).unwrap();
    assert_eq!(v.total_frames, 50);
    assert_eq!(v.kind(), SourceKind::Decoder);
    let f = v.fetch_frames(&[7, 42]).unwrap();
    assert_eq!(&*f[0].bytes, b"decoded 7 from my video.mp4");
    assert!(tmp
        .path()
        .join("cache/vid")
        .join(frame_file_name(42))
        .is_file());

    // cached frames are served without the decoder
    let broken = DecoderConfig {
        command: "exit 1".into(),
        ..fake_decoder(&tmp.path().join("cache"))
    };
    let v2 = VideoHandle::decoder(&input, "vid", Some(50), broken).unwrap();
    assert_eq!(v2.fetch_frames(&[42]).unwrap()[0].bytes, f[1].bytes);
    assert!(matches!(
        v2.fetch_frames(&[1]),
        Err(Error::DecoderFailure(_))
    ));
    assert!(matches!(
        v2.fetch_frames(&[50]),
        Err(Error::FrameUnavailable { index: 50 })
    ));
}

#[test]
fn decoder_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let err = VideoHandle::decoder(
        &tmp.path().join("nope.mp4"),
        "x",
        None,
        fake_decoder(tmp.path()),
    )
    .unwrap_err();
    assert!(matches!(err, Error::DecoderFailure(_)), "{err}");
}

#[test]
fn synthetic_labels() {
    let v = VideoHandle::synthetic("s", 1000, vec![(510, 515)]).unwrap();
    let f = v.fetch_frames(&[0, 511]).unwrap();
    assert_eq!(f[0].synthetic_label(), Some("frame-0"));
    assert_eq!(f[1].synthetic_label(), Some("frame-511 KEY-0"));
}

#[test]
fn resolution_order() {
    let tmp = tempfile::tempdir().unwrap();
    image_dir(tmp.path(), "dir", 20);
    fs::write(
        tmp.path().join("syn.sim.toml"),
        "seed = 3\ntotal_frames = 300\n",
    )
    .unwrap();
    fs::write(tmp.path().join("file.mp4"), "x").unwrap();
    let paths = PathsConfig {
        video_root: tmp.path().to_path_buf(),
        frame_rate: Some(4.0),
        decoder: Some(fake_decoder(&tmp.path().join("cache"))),
        ..Default::default()
    };
    let d = resolve_video(&paths, "dir").unwrap();
    assert_eq!(
        (d.video.kind(), d.video.total_frames, d.video.frame_rate),
        (SourceKind::ImageDir, 20, 4.0)
    );
    let s = resolve_video(&paths, "syn").unwrap();
    assert_eq!(s.video.kind(), SourceKind::Synthetic);
    assert_eq!(s.video.id, "syn");
    assert_eq!(s.video.total_frames, 300);
    assert!(s.sim.is_some());
    let f = resolve_video(&paths, "file").unwrap();
    assert_eq!(f.video.kind(), SourceKind::Decoder);
    assert!(matches!(
        resolve_video(&paths, "ghost"),
        Err(Error::DecoderFailure(_))
    ));
}
