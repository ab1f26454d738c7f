use super::*;
use crate::codec::VOCAB_SIZE;
use crate::train::AdamState;

fn frame_vecs<T: Float>(h: usize, seed: u64) -> Tensor<T> {
    Tensor::randn([40, h], 1.0, &mut SeededRng::new(seed))
}

fn tokens(n: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = SeededRng::new(seed);
    let mut v = vec![TokenId::START];
    v.extend((1..n).map(|_| TokenId::new(rng.below(308) as u32).unwrap()));
    v
}

fn tiny(kind: ModelKind, mode: CrossAttentionMode) -> ModelConfig {
    ModelConfig {
        kind,
        hidden: 16,
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        d_ff: 32,
        dropout: 0.1,
        max_target_len: 64,
        cross_attention_mode: mode,
    }
}

fn all_configs() -> Vec<ModelConfig> {
    vec![
        tiny(ModelKind::Seq2seq, CrossAttentionMode::Standard),
        tiny(ModelKind::Vmt, CrossAttentionMode::Standard),
        tiny(ModelKind::Vmt, CrossAttentionMode::PaperLiteral),
    ]
}

#[test]
fn logits_shape_for_twelve_tokens() {
    for cfg in [ModelConfig::vmt_reduced(), ModelConfig::seq2seq_reduced()] {
        let m = Model::<f64>::new(cfg, 1).unwrap();
        let y = m.logits(&frame_vecs(64, 2), &tokens(12, 3)).unwrap();
        assert_eq!(y.shape(), &[12, VOCAB_SIZE]);
    }
}

#[test]
fn rows_are_distributions() {
    for cfg in all_configs() {
        let m = Model::<f64>::new(cfg, 4).unwrap();
        let y = m.logits(&frame_vecs(16, 5), &tokens(9, 6)).unwrap();
        let mut s = Session::eval(&m.params);
        let v = s.constant(y);
        let p = s.g.softmax(v, 1).unwrap();
        for row in s.g.value(p).data().chunks(VOCAB_SIZE) {
            assert!(row.iter().all(|&x| x > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn eval_forward_is_deterministic() {
    for cfg in all_configs() {
        let m = Model::<f32>::new(cfg, 7).unwrap();
        let (fv, t) = (frame_vecs(16, 8), tokens(10, 9));
        assert_eq!(m.logits(&fv, &t).unwrap(), m.logits(&fv, &t).unwrap());
    }
}

#[test]
fn decoders_are_causal() {
    for cfg in all_configs() {
        let m = Model::<f64>::new(cfg.clone(), 10).unwrap();
        for case in 0..5u64 {
            let fv = frame_vecs(16, 100 + case);
            let a = tokens(20, 200 + case);
            let cut = 1 + (case as usize * 3) % 18;
            let mut b = a.clone();
            for (j, t) in b.iter_mut().enumerate().skip(cut) {
                *t = TokenId::new(((t.index() + 17 * j + 1) % 308) as u32).unwrap();
            }
            let (ya, yb) = (m.logits(&fv, &a).unwrap(), m.logits(&fv, &b).unwrap());
            let n = cut * VOCAB_SIZE;
            let diff = ya.data()[..n]
                .iter()
                .zip(&yb.data()[..n])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-6, "{:?} case {case}: prefix changed by {diff}", cfg.kind);
            assert_ne!(ya.data()[n..], yb.data()[n..]);
        }
    }
}

#[test]
fn seq2seq_shares_gru_layers() {
    let m = Model::<f64>::new(ModelConfig::seq2seq_reduced(), 0).unwrap();
    let s2s = m.as_seq2seq().unwrap();
    assert_eq!(s2s.encoder_cells().len(), 2);
    for (e, d) in s2s.encoder_cells().iter().zip(s2s.decoder_cells()) {
        assert_eq!(e.w_ih, d.w_ih);
        assert_eq!(e.w_hh, d.w_hh);
    }
    let gru: Vec<_> = m.params.iter().filter(|(_, n, _)| n.contains("gru")).map(|(_, n, _)| n.to_string()).collect();
    assert_eq!(gru.len(), 2 * 4, "{gru:?}");
}

#[test]
fn reduced_parameter_counts() {
    // conv (channels 8, 16, 64; 4×4 kernels): 8·3·16 + 16·8·16 + 64·16·16 = 18816,
    // plus layer-norm scale/shift 2·(8 + 16 + 64) = 176.
    let conv = 18_816 + 176;
    // encoder layer: 4·64·64 attention + FFN (64·256 + 256 + 256·64 + 64) + 2 norms
    let enc = 16_384 + 33_088 + 256;
    // decoder layer: two attentions + FFN + 3 norms
    let dec = 32_768 + 33_088 + 384;
    let embed = 64 * 310;
    let out = 64 * 310 + 310;
    let vmt = Model::<f32>::new(ModelConfig::vmt_reduced(), 0).unwrap();
    assert_eq!(vmt.num_parameters(), conv + 2 * enc + 2 * dec + embed + out);
    assert_eq!(vmt.num_parameters(), 290_918);

    // GRU layer: two [192, 64] matrices and two 192 biases
    let gru = 2 * 192 * 64 + 2 * 192;
    let in_proj = 128 * 64 + 64;
    let s2s = Model::<f32>::new(ModelConfig::seq2seq_reduced(), 0).unwrap();
    assert_eq!(s2s.num_parameters(), conv + 2 * gru + embed + 16_384 + in_proj + out);
}

#[test]
fn full_config_channel_plan() {
    let m = Model::<f32>::new(ModelConfig::vmt_full(), 0).unwrap();
    assert_eq!(m.frame_encoder.channels, [64, 128, 512]);
}

#[test]
fn attention_modes_share_shape_not_values() {
    let a = Model::<f64>::new(tiny(ModelKind::Vmt, CrossAttentionMode::Standard), 3).unwrap();
    let b = Model::<f64>::new(tiny(ModelKind::Vmt, CrossAttentionMode::PaperLiteral), 3).unwrap();
    let (fv, t) = (frame_vecs(16, 1), tokens(7, 2));
    let (ya, yb) = (a.logits(&fv, &t).unwrap(), b.logits(&fv, &t).unwrap());
    assert_eq!(ya.shape(), yb.shape());
    assert_ne!(ya, yb);
}

#[test]
fn target_limits() {
    let m = Model::<f64>::new(tiny(ModelKind::Vmt, CrossAttentionMode::Standard), 0).unwrap();
    let fv = frame_vecs(16, 0);
    assert!(matches!(m.logits(&fv, &[]), Err(ModelError::EmptyTarget)));
    assert!(matches!(
        m.logits(&fv, &tokens(65, 0)),
        Err(ModelError::TargetTooLong { len: 65, max: 64 })
    ));
    assert!(m.logits(&frame_vecs(8, 0), &tokens(3, 0)).is_err());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::vmt_reduced();
    c.heads = 3;
    assert!(Model::<f32>::new(c, 0).is_err());
    let mut c = ModelConfig::seq2seq_reduced();
    c.dec_layers = 3;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::vmt_reduced();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    let json = r#"{"kind":"vmt","hidden":64,"enc_layers":2,"dec_layers":2,"heads":4,"d_ff":256,"dropout":0.1,"max_target_len":1024}"#;
    let c: ModelConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c, ModelConfig::vmt_reduced());
}

#[test]
fn incremental_decoding_matches_full_forward() {
    for cfg in all_configs() {
        let m = Model::<f64>::new(cfg.clone(), 21).unwrap();
        let (fv, t) = (frame_vecs(16, 22), tokens(15, 23));
        let full = m.logits(&fv, &t).unwrap();
        let mut st = m.begin_decode(&fv).unwrap();
        for (i, &tok) in t.iter().enumerate() {
            let row = m.decode_step(&mut st, tok).unwrap();
            let want = &full.data()[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE];
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).abs() < 1e-9, "{:?}/{:?} pos {i}", cfg.kind, cfg.cross_attention_mode);
            }
        }
        assert_eq!(st.position(), 15);
    }
}

#[test]
fn decode_step_stops_at_cap() {
    let mut cfg = tiny(ModelKind::Seq2seq, CrossAttentionMode::Standard);
    cfg.max_target_len = 2;
    let m = Model::<f64>::new(cfg, 0).unwrap();
    let mut st = m.begin_decode(&frame_vecs(16, 0)).unwrap();
    m.decode_step(&mut st, TokenId::START).unwrap();
    m.decode_step(&mut st, TokenId::START).unwrap();
    assert!(matches!(m.decode_step(&mut st, TokenId::START), Err(ModelError::TargetTooLong { .. })));
}

fn ckpt_of(m: Model<f32>) -> Checkpoint<f32> {
    let mut opt = AdamState::new(&m.params);
    opt.step = 17;
    for (i, mv) in opt.m.iter_mut().enumerate() {
        mv.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f32 * 1e-3);
    }
    Checkpoint {
        model: m,
        codec: crate::codec::CodecConfig::default(),
        seed: 5,
        optimizer: Some(opt),
        meta: serde_json::json!({"note": "x"}),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in all_configs() {
        let mut m = Model::<f32>::new(cfg, 11).unwrap();
        // perturb so the reloaded values cannot come from re-initialization
        let id = m.params.ids().next().unwrap();
        m.params.get_mut(id).data_mut()[0] = 0.123;
        let ck = ckpt_of(m);
        let path = dir.path().join("m.vmtc");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        let (fv, t) = (frame_vecs(16, 12), tokens(8, 13));
        let (ya, yb) = (ck.model.logits(&fv, &t).unwrap(), back.model.logits(&fv, &t).unwrap());
        assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.seed, 5);
        assert_eq!(back.meta, ck.meta);
        for ((_, na, a), (_, nb, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }
}

fn bytes(cfg: ModelConfig) -> Vec<u8> {
    checkpoint::to_bytes(&ckpt_of(Model::<f32>::new(cfg, 0).unwrap())).unwrap()
}

/// Rewrites the JSON header and fixes up its length prefix.
fn edit_header(b: &[u8], f: impl FnOnce(&str) -> String) -> Vec<u8> {
    let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&b[16..16 + hlen]).unwrap();
    let new = f(header);
    let mut out = b[..8].to_vec();
    out.extend_from_slice(&(new.len() as u64).to_le_bytes());
    out.extend_from_slice(new.as_bytes());
    out.extend_from_slice(&b[16 + hlen..]);
    out
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let cfg = tiny(ModelKind::Vmt, CrossAttentionMode::Standard);
    let b = bytes(cfg.clone());

    let tampered = edit_header(&b, |h| h.replace("dec.l1.ffn.l2.w", "dec.l1.ffn.l9.w"));
    match checkpoint::from_bytes::<f32>(&tampered) {
        Err(ModelError::UnknownParam(n)) => assert_eq!(n, "dec.l1.ffn.l9.w"),
        other => panic!("{:?}", other.err()),
    }

    let mut v = b.clone();
    v[4] = 9;
    assert!(matches!(
        checkpoint::from_bytes::<f32>(&v),
        Err(ModelError::Version { found: 9, expected: 1 })
    ));

    assert!(matches!(checkpoint::from_bytes::<f64>(&b), Err(ModelError::DType { .. })));
    assert!(matches!(checkpoint::from_bytes::<f32>(&b[..b.len() - 3]), Err(ModelError::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes::<f32>(b"VMTX"), Err(ModelError::Checkpoint(_))));

    // a checkpoint of a smaller d_ff claims the same names with other shapes
    let mut small = cfg.clone();
    small.d_ff = 16;
    let sb = bytes(small);
    let swapped = edit_header(&sb, |h| h.replace("\"d_ff\":16", "\"d_ff\":32"));
    match checkpoint::from_bytes::<f32>(&swapped) {
        Err(ModelError::ParamShape { name, expected, found }) => {
            assert_eq!(name, "enc.l0.ffn.l1.w");
            assert_eq!(expected, vec![16, 32]);
            assert_eq!(found, vec![16, 16]);
        }
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn checkpoint_missing_parameter() {
    let cfg = tiny(ModelKind::Seq2seq, CrossAttentionMode::Standard);
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let b = checkpoint::to_bytes(&Checkpoint {
        model: m,
        codec: Default::default(),
        seed: 0,
        optimizer: None,
        meta: serde_json::Value::Null,
    })
    .unwrap();
    let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&b[16..16 + hlen]).unwrap();
    let params = header["params"].as_array_mut().unwrap();
    let last = params.pop().unwrap();
    let cut: usize = last["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).product();
    let new = serde_json::to_vec(&header).unwrap();
    let mut out = b[..8].to_vec();
    out.extend_from_slice(&(new.len() as u64).to_le_bytes());
    out.extend_from_slice(&new);
    out.extend_from_slice(&b[16 + hlen..b.len() - cut * 4]);
    match checkpoint::from_bytes::<f32>(&out) {
        Err(ModelError::MissingParam(n)) => assert_eq!(n, last["name"].as_str().unwrap()),
        other => panic!("{:?}", other.err()),
    }
}
