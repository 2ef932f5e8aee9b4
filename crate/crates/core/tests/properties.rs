use proptest::prelude::*;

use pointneuron::encoder::{knn_graph_points, knn_graph_with};
use pointneuron::geom::{self, Point3};
use pointneuron::metrics::{evaluate, nearest_distances, precision_recall_f1_with};
use pointneuron::par::Exec;
use pointneuron::skeleton::{chamfer_sum, sphere_iou, spherical_nms, NmsConfig, SkeletalPoint};
use pointneuron::swc::{parse_swc, write_swc, NeuronTree, SwcNode};

fn point() -> impl Strategy<Value = Point3> {
    [-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(), 1..max)
}

/// Random tree where node `i` hangs off an earlier node.
fn tree() -> impl Strategy<Value = NeuronTree> {
    prop::collection::vec((point(), 0.1..5.0f64, any::<prop::sample::Index>()), 1..25).prop_map(
        |raw| {
            let nodes = raw
                .iter()
                .enumerate()
                .map(|(i, (p, r, parent))| SwcNode {
                    id: i as i64 + 1,
                    node_type: 2,
                    position: *p,
                    radius: *r,
                    parent_id: if i == 0 {
                        -1
                    } else {
                        parent.index(i) as i64 + 1
                    },
                })
                .collect();
            NeuronTree::new(nodes)
        },
    )
}

fn proposals() -> impl Strategy<Value = Vec<SkeletalPoint>> {
    prop::collection::vec((point(), 0.3..4.0f64, 0.0..1.0f64), 1..40).prop_map(|raw| {
        raw.into_iter()
            .map(|(position, radius, score)| SkeletalPoint {
                position,
                radius,
                score,
                feature: Vec::new(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_scale_free(
        c1 in point(), c2 in point(), r1 in 0.1..8.0f64, r2 in 0.1..8.0f64, s in 0.1..10.0f64,
    ) {
        let a = sphere_iou(&c1, r1, &c2, r2).unwrap();
        let b = sphere_iou(&c2, r2, &c1, r1).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let scaled = sphere_iou(&geom::scale(&c1, s), r1 * s, &geom::scale(&c2, s), r2 * s).unwrap();
        prop_assert!((a - scaled).abs() <= 1e-9);
        prop_assert!((sphere_iou(&c1, r1, &c1, r1).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in cloud(30), b in cloud(30)) {
        let ab = chamfer_sum(&a, &b).unwrap();
        let ba = chamfer_sum(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert_eq!(chamfer_sum(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(points in proposals(), iou in 0.05..0.25f64) {
        let cfg = NmsConfig { iou_threshold: iou, score_threshold: 0.0 };
        let kept = spherical_nms(&points, &cfg).unwrap();
        let best = (0..points.len())
            .max_by(|&a, &b| points[a].score.total_cmp(&points[b].score).then(b.cmp(&a)))
            .unwrap();
        prop_assert_eq!(kept.first(), Some(&best));
        for (x, &a) in kept.iter().enumerate() {
            prop_assert!(a < points.len());
            for &b in &kept[x + 1..] {
                prop_assert!(a != b);
                let o = sphere_iou(&points[a].position, points[a].radius, &points[b].position, points[b].radius).unwrap();
                prop_assert!(o <= iou);
            }
        }
        // every dropped proposal overlaps something kept
        for i in (0..points.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(kept.iter().any(|&k| sphere_iou(
                &points[i].position, points[i].radius, &points[k].position, points[k].radius
            ).unwrap() > iou));
        }
    }

    #[test]
    fn metric_invariants(a in tree(), b in tree(), shift in point()) {
        let r = evaluate(&a, &b, 1.0, 2.0, 2.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.pds));
        prop_assert!(r.esa >= 0.0 && r.dsa >= 0.0);
        prop_assert!(r.dsa == 0.0 || r.dsa > 2.0);
        let hm = if r.precision + r.recall > 0.0 { 2.0 * r.precision * r.recall / (r.precision + r.recall) } else { 0.0 };
        prop_assert!((r.f1 - hm).abs() <= 1e-9);

        // swapping the trees swaps precision and recall, distances stay
        let s = evaluate(&b, &a, 1.0, 2.0, 2.0).unwrap();
        prop_assert!((r.precision - s.recall).abs() <= 1e-9);
        prop_assert!((r.esa - s.esa).abs() <= 1e-9);

        let mv = |t: &NeuronTree| {
            let mut t = t.clone();
            for n in &mut t.nodes {
                n.position = geom::add(&n.position, &shift);
            }
            t
        };
        let m = evaluate(&mv(&a), &mv(&b), 1.0, 2.0, 2.0).unwrap();
        prop_assert!((r.esa - m.esa).abs() <= 1e-9 && (r.f1 - m.f1).abs() <= 1e-9 && (r.pds - m.pds).abs() <= 1e-9);
    }

    #[test]
    fn swc_round_trip(t in tree()) {
        let once = parse_swc(&write_swc(&t).unwrap()).unwrap();
        let twice = parse_swc(&write_swc(&once).unwrap()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.len(), t.len());
        for (x, y) in once.nodes.iter().zip(&t.nodes) {
            prop_assert_eq!(x.parent_id, y.parent_id);
            prop_assert!(geom::dist(&x.position, &y.position) <= 1e-4 * geom::norm(&y.position).max(1.0));
        }
    }

    #[test]
    fn knn_rows_are_sorted_and_exclude_self(pts in prop::collection::vec(point(), 2..60), k in 1usize..10) {
        let k = k.min(pts.len() - 1);
        let g = knn_graph_points(&pts, k).unwrap();
        for i in 0..pts.len() {
            let row = g.row(i);
            prop_assert!(!row.contains(&i));
            let d: Vec<f64> = row.iter().map(|&j| geom::dist2(&pts[i], &pts[j])).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            // nothing outside the row is strictly closer than its last entry
            let worst = *d.last().unwrap();
            prop_assert!((0..pts.len()).filter(|j| *j != i && !row.contains(j)).all(|j| geom::dist2(&pts[i], &pts[j]) >= worst));
        }
    }

    #[test]
    fn parallel_matches_sequential(a in cloud(200), b in cloud(200), t1 in tree(), t2 in tree()) {
        prop_assert_eq!(nearest_distances(Exec::Sequential, &a, &b), nearest_distances(Exec::Parallel, &a, &b));
        let flat: Vec<f64> = a.iter().flatten().copied().collect();
        let k = 3.min(a.len().saturating_sub(1));
        if k > 0 {
            prop_assert_eq!(knn_graph_with(Exec::Sequential, &flat, 3, k).unwrap(), knn_graph_with(Exec::Parallel, &flat, 3, k).unwrap());
        }
        prop_assert_eq!(
            precision_recall_f1_with(Exec::Sequential, &t1, &t2, 1.0, 2.0).unwrap(),
            precision_recall_f1_with(Exec::Parallel, &t1, &t2, 1.0, 2.0).unwrap()
        );
    }
}
