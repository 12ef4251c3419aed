use std::fs;

use strokeseg::checkpoint::{decode, encode, load_checkpoint, load_matching, save_checkpoint};
use strokeseg::manifest::{load_manifest, Entry, Manifest};
use strokeseg::vol::{
    load_mask, load_volume, load_volume_with_sidecar, save_mask, save_volume,
    save_volume_with_crop, CropOrigin,
};
use strokeseg::Error;
use strokeseg_core::network::{UNet3d, UNetConfig};
use strokeseg_core::optim::AdamState;
use strokeseg_core::preprocess::CropBox;
use strokeseg_core::volume::{IntensityKind, Mask, Volume, VoxelData};
use strokeseg_core::Tensor;

#[test]
fn golden_i16_volume_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new(
        [2, 2, 1],
        [0.5, 0.5, 2.0],
        VoxelData::I16(vec![-1000, 0, 1, 258]),
        IntensityKind::Hu,
    )
    .unwrap();
    let p = dir.path().join("g");
    save_volume(&v, &p).unwrap();
    let raw = fs::read(dir.path().join("g.raw")).unwrap();
    assert_eq!(raw, [0x18, 0xFC, 0x00, 0x00, 0x01, 0x00, 0x02, 0x01]);
    let json = fs::read_to_string(dir.path().join("g.json")).unwrap();
    assert_eq!(
        json,
        "{\"dims\":[2,2,1],\"spacing\":[0.5,0.5,2.0],\"dtype\":\"i16le\",\"kind\":\"hu\"}\n"
    );
}

#[test]
fn golden_f32_and_mask_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::from_f32(
        [2, 1, 1],
        [1.0; 3],
        vec![1.0, 0.5],
        IntensityKind::Normalized,
    )
    .unwrap();
    save_volume(&v, &dir.path().join("f")).unwrap();
    assert_eq!(
        fs::read(dir.path().join("f.raw")).unwrap(),
        [0, 0, 0x80, 0x3F, 0, 0, 0, 0x3F]
    );
    let m = Mask::new([3, 1, 1], vec![0, 1, 1]).unwrap();
    save_mask(&m, [1.0; 3], None, &dir.path().join("m")).unwrap();
    assert_eq!(fs::read(dir.path().join("m.raw")).unwrap(), [0, 1, 1]);
}

#[test]
fn volumes_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let vals: Vec<f32> = (0..5 * 4 * 3)
        .map(|i| (i as f32 * 0.37).sin().abs())
        .collect();
    let v = Volume::from_f32(
        [5, 4, 3],
        [0.9, 0.8, 5.0],
        vals.clone(),
        IntensityKind::Normalized,
    )
    .unwrap();
    let crop = CropOrigin::new(
        CropBox {
            lo: [1, 2, 3],
            hi: [6, 6, 6],
        },
        [10, 10, 10],
    );
    let p = dir.path().join("sub/v.json");
    save_volume_with_crop(&v, Some(crop), &p).unwrap();
    let (back, sc) = load_volume_with_sidecar(&p).unwrap();
    assert_eq!(sc.crop_origin, Some(crop));
    match back.data() {
        VoxelData::F32(d) => assert!(d.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits())),
        _ => panic!("dtype changed"),
    }
    assert_eq!(back.spacing(), [0.9, 0.8, 5.0]);

    let hu: Vec<i16> = (0..60).map(|i| (i * 97 % 4000 - 1500) as i16).collect();
    let h = Volume::new(
        [5, 4, 3],
        [1.0; 3],
        VoxelData::I16(hu.clone()),
        IntensityKind::Hu,
    )
    .unwrap();
    save_volume(&h, &dir.path().join("h")).unwrap();
    assert_eq!(
        load_volume(&dir.path().join("h.raw")).unwrap().data(),
        &VoxelData::I16(hu)
    );

    let m = Mask::new([5, 4, 3], (0..60).map(|i| (i % 7 == 0) as u8).collect()).unwrap();
    save_mask(&m, [1.0; 3], Some(crop), &dir.path().join("m")).unwrap();
    assert_eq!(load_mask(&dir.path().join("m")).unwrap(), m);
}

#[test]
fn malformed_volumes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("a.json"),
        r#"{"dims":[2,2,2],"spacing":[1,1,1],"dtype":"f32le","kind":"normalized"}"#,
    )
    .unwrap();
    fs::write(d.join("a.raw"), [0u8; 31]).unwrap();
    assert!(matches!(
        load_volume(&d.join("a")),
        Err(Error::Format { .. })
    ));
    fs::write(
        d.join("b.json"),
        r#"{"dims":[1,1,2],"spacing":[1,1,1],"dtype":"u8le","kind":"mask"}"#,
    )
    .unwrap();
    fs::write(d.join("b.raw"), [0u8, 2]).unwrap();
    assert!(matches!(load_mask(&d.join("b")), Err(Error::Format { .. })));
    assert!(load_volume(&d.join("b")).is_err());
    fs::write(
        d.join("c.json"),
        r#"{"dims":[0,1,1],"spacing":[1,1,1],"dtype":"i16le","kind":"hu"}"#,
    )
    .unwrap();
    assert!(load_volume(&d.join("c")).is_err());
    assert!(matches!(
        load_volume(&d.join("missing")),
        Err(Error::Io { .. })
    ));
}

fn write_pair(dir: &std::path::Path, id: &str) {
    let v = Volume::new(
        [2, 2, 2],
        [1.0; 3],
        VoxelData::I16(vec![0; 8]),
        IntensityKind::Hu,
    )
    .unwrap();
    save_volume(&v, &dir.join(format!("{id}_ct"))).unwrap();
    save_mask(
        &Mask::zeros([2, 2, 2]),
        [1.0; 3],
        None,
        &dir.join(format!("{id}_mask")),
    )
    .unwrap();
}

#[test]
fn manifest_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pair(d, "a");
    write_pair(d, "b");
    let path = d.join("m.csv");

    fs::write(&path, "").unwrap();
    assert!(load_manifest(&path).unwrap().is_empty());

    fs::write(
        &path,
        "patient_id,volume_path,mask_path,fold\na,a_ct,a_mask,3\nb,b_ct.json,b_mask,\n",
    )
    .unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m.get("a").unwrap().volume_path, d.join("a_ct"));
    assert_eq!(m.get("b").unwrap().fold, None);
    assert_eq!(m.folds(), vec![3]);
    assert_eq!(m.fold(3).len(), 1);
    assert!(m.training(3).is_empty());

    for bad in [
        "id,volume_path,mask_path,fold\na,a_ct,a_mask,0\n",
        "patient_id,volume_path,mask_path,fold\na,a_ct,a_mask,0\na,b_ct,b_mask,1\n",
        "patient_id,volume_path,mask_path,fold\na,a_ct,a_mask,5\n",
        "patient_id,volume_path,mask_path,fold\na,a_ct,a_mask,x\n",
        "patient_id,volume_path,mask_path,fold\nc,c_ct,c_mask,0\n",
    ] {
        fs::write(&path, bad).unwrap();
        assert!(
            matches!(load_manifest(&path), Err(Error::Manifest { .. })),
            "{bad}"
        );
    }
}

#[test]
fn manifest_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pair(d, "a");
    write_pair(d, "b");
    let m = Manifest {
        entries: vec![
            Entry {
                patient_id: "a".into(),
                volume_path: d.join("a_ct"),
                mask_path: d.join("a_mask"),
                fold: Some(0),
            },
            Entry {
                patient_id: "b".into(),
                volume_path: d.join("b_ct"),
                mask_path: d.join("b_mask"),
                fold: None,
            },
        ],
    };
    m.save(&d.join("out.csv")).unwrap();
    let text = fs::read_to_string(d.join("out.csv")).unwrap();
    assert_eq!(
        text,
        "patient_id,volume_path,mask_path,fold\na,a_ct,a_mask,0\nb,b_ct,b_mask,\n"
    );
    assert_eq!(load_manifest(&d.join("out.csv")).unwrap(), m);
}

fn tiny() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        patch_size: 8,
        se_reduction: 2,
        ..UNetConfig::desk()
    }
}

#[test]
fn checkpoint_round_trips_forward_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = UNet3d::<f32>::new(tiny(), 5).unwrap();
    let mut adam = AdamState::new(model.params().tensors());
    adam.step = 17;
    adam.m[0][0] = 0.25;
    adam.v[1][0] = 3.5;
    let p = dir.path().join("ck/model.svck");
    save_checkpoint(&model, 17, Some(&adam), &p).unwrap();
    let ck = load_checkpoint(&p).unwrap();
    assert_eq!(ck.iteration, 17);
    assert_eq!(ck.adam.as_ref(), Some(&adam));
    assert_eq!(ck.model.config(), model.config());
    let x = Tensor::from_vec(
        &[1, 1, 8, 8, 8],
        (0..512).map(|i| (i as f32 * 0.01).cos()).collect(),
    )
    .unwrap();
    let a = model.predict(&x).unwrap();
    let b = ck.model.predict(&x).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(u, v)| u.to_bits() == v.to_bits()));

    assert!(load_matching(&p, &UNetConfig::desk()).is_err());
    assert!(load_matching(&p, &tiny()).is_ok());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = UNet3d::<f32>::new(tiny(), 5).unwrap();
    let bytes = encode(&model, 3, None).unwrap();
    let p = std::path::Path::new("x.svck");
    assert!(decode(&bytes, p).is_ok());
    assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode(&extra, p).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode(&magic, p).is_err());
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(decode(&version, p), Err(Error::Checkpoint { .. })));
}
