mod common;

use c2fvl::report_codec::{compile_report, decode_vector, parse_report, TextVector};
use c2fvl::Error;
use common::codec::{enumerated_table, oracle, round_trip, EXEMPLAR, ZONES};
use proptest::prelude::*;

#[test]
fn exemplar_vector() {
    assert_eq!(compile_report(EXEMPLAR).unwrap().values(), [1, 2, 1, 1, 0, 0, 1, 1]);
    assert_eq!(compile_report(EXEMPLAR).unwrap().to_string(), "[1,2,1,1,0,0,1,1]");
}

#[test]
fn enumerated_table_matches_oracle() {
    let (checked, bad) = enumerated_table();
    assert_eq!(checked, 63 * 9 * 3 * 2);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn round_trip_on_enumerated_set() {
    let (checked, bad) = round_trip();
    assert_eq!(checked, 63 * 9);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn spec_examples() {
    let ast = parse_report(EXEMPLAR).unwrap();
    assert!(ast.bilateral());
    assert_eq!(ast.lesion_count(), 2);
    let v = compile_report("Unilateral pulmonary infection, one infected area, upper left lung").unwrap();
    assert_eq!(v.values(), [0, 1, 1, 0, 0, 0, 0, 0]);
    let v = compile_report("pulmonary infection, three infected areas, upper middle lower left lung").unwrap();
    assert_eq!(v.values(), [0, 3, 1, 1, 1, 0, 0, 0]);
    let v = compile_report("Bilateral pulmonary infection, two infected areas, lower left lung and upper right lung").unwrap();
    assert_eq!(v.values(), [1, 2, 0, 0, 1, 1, 0, 0]);
    assert_eq!(decode_vector(&TextVector::zero()).unwrap(), "No pulmonary infection");
    assert_eq!(compile_report("No pulmonary infection").unwrap(), TextVector::zero());
    assert_eq!(
        decode_vector(&TextVector::new([0, 1, 0, 0, 0, 0, 0, 1]).unwrap()).unwrap(),
        "Unilateral pulmonary infection, one infected area, lower right lung"
    );
    assert_eq!(decode_vector(&TextVector::new([1, 2, 1, 1, 0, 0, 1, 1]).unwrap()).unwrap(), EXEMPLAR);
}

#[test]
fn errors() {
    assert!(matches!(
        compile_report("Bilateral pulmonary infection, one infected area, upper left lung"),
        Err(Error::InconsistentReport(_))
    ));
    for bad in ["", "lung", "pulmonary infection, upper left lung", "pulmonary infection, two areas, upper left kidney"] {
        assert!(matches!(compile_report(bad), Err(Error::UnparseableReport(_))), "{bad:?}");
    }
    assert!(matches!(TextVector::new([2, 1, 1, 0, 0, 0, 0, 0]), Err(Error::InvalidVector(_))));
    assert!(matches!(TextVector::new([1, 1, 1, 0, 0, 0, 0, 0]), Err(Error::InvalidVector(_))));
    assert!(matches!(TextVector::new([0, 1, 0, 3, 0, 0, 0, 0]), Err(Error::InvalidVector(_))));
}

fn zone_order() -> impl Strategy<Value = Vec<usize>> {
    Just(vec![0usize, 1, 2]).prop_shuffle()
}

proptest! {
    #[test]
    fn zone_order_and_case_do_not_matter(bits in 1u8..64, count in 1u32..=9, lo in zone_order(), ro in zone_order(), upper in any::<bool>()) {
        let bilateral = bits & 0b111 != 0 && bits & 0b111000 != 0;
        let mut lungs = Vec::new();
        for (side, shift, order) in [("left", 0, &lo), ("right", 3, &ro)] {
            let zs: Vec<&str> = order.iter().filter(|&&i| bits >> (shift + i) & 1 == 1).map(|&i| ZONES[i]).collect();
            if !zs.is_empty() {
                lungs.push(format!("{} {side} lung", zs.join(" ")));
            }
        }
        let prefix = if bilateral { "Bilateral " } else { "" };
        let mut text = format!("{prefix}pulmonary infection, {count} infected areas, {}", lungs.join(", "));
        if upper {
            text = text.to_uppercase();
        }
        let want = oracle(if bilateral { "Bilateral" } else { "" }, count, bits).unwrap();
        prop_assert_eq!(compile_report(&text).unwrap().values(), want);
    }

    #[test]
    fn decode_parse_encode_identity(bits in 0u8..64, count in 1u32..40) {
        let bilateral = bits & 0b111 != 0 && bits & 0b111000 != 0;
        let mut v = [0u32; 8];
        v[0] = u32::from(bilateral);
        v[1] = if bits == 0 { 0 } else { count };
        for i in 0..6 {
            v[2 + i] = u32::from(bits >> i & 1 == 1);
        }
        let tv = TextVector::new(v).unwrap();
        prop_assert_eq!(compile_report(&decode_vector(&tv).unwrap()).unwrap(), tv);
    }
}
