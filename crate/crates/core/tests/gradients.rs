mod common;

use clicooper::nn::{read_checkpoint, write_checkpoint, Activation, Segment};
use common::{segment_gradient_errors, watermark_gradient_error};

#[test]
fn segment_gradients_match_central_differences() {
    for seed in 0..40 {
        let (ep, ex) = segment_gradient_errors(seed);
        assert!(ep < 1e-5, "seed {seed}: parameter gradient rel err {ep:e}");
        assert!(ex < 1e-5, "seed {seed}: input gradient rel err {ex:e}");
    }
}

#[test]
fn watermark_gradients_match_central_differences() {
    for seed in 0..30 {
        let e = watermark_gradient_error(seed);
        assert!(e < 1e-6, "seed {seed}: regulariser gradient rel err {e:e}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let seg = Segment::init(&[5, 7, 3], Activation::Identity, 4).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&seg, &mut buf).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    let (a, b) = (seg.flatten_params(), back.flatten_params());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.layers()[1].activation, Activation::Identity);
    assert_eq!(back.layers()[0].activation, Activation::Relu);
}
