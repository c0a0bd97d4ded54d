// Ten hand-counted 10-frame metric fixtures.
//
// Ground truth is a 10x10 box. Each frame lists the prediction, whether its
// center error is <= 20 px, and how many of the 51 success thresholds
// k/50 it strictly exceeds (ceil(50 * IoU), or 50 * IoU when that is an
// integer, since IoU > k/50 is strict).

use oatrack_core::BBox;

pub struct Fixture {
    pub name: &'static str,
    pub gt: Vec<BBox>,
    pub pred: Vec<BBox>,
    pub hits_at_20: usize,
    pub success_count: usize,
}

impl Fixture {
    pub fn precision_at_20(&self) -> f64 {
        self.hits_at_20 as f64 / 10.0
    }

    pub fn auc(&self) -> f64 {
        self.success_count as f64 / 510.0
    }
}

enum P {
    /// Same size, translated.
    Shift(f64, f64),
    /// Same center and width, height `h` (contains or sits inside the target).
    Tall(f64),
    /// Top half of the target.
    Half,
}

fn frame(t: usize, p: &P) -> (BBox, BBox) {
    let gt = BBox::new(40.0 + 3.0 * t as f64, 60.0 - 2.0 * t as f64, 10.0, 10.0);
    let pred = match *p {
        P::Shift(dx, dy) => BBox::new(gt.x + dx, gt.y + dy, 10.0, 10.0),
        P::Tall(h) => BBox::new(gt.x, gt.y + 5.0 - h / 2.0, 10.0, h),
        P::Half => BBox::new(gt.x, gt.y, 10.0, 5.0),
    };
    (gt, pred)
}

fn fixture(name: &'static str, rows: &[(P, bool, usize)]) -> Fixture {
    assert_eq!(rows.len(), 10);
    let (gt, pred) = rows.iter().enumerate().map(|(t, (p, _, _))| frame(t, p)).unzip();
    Fixture {
        name,
        gt,
        pred,
        hits_at_20: rows.iter().filter(|r| r.1).count(),
        success_count: rows.iter().map(|r| r.2).sum(),
    }
}

pub fn fixtures() -> Vec<Fixture> {
    use P::*;
    let exact = || (Shift(0.0, 0.0), true, 50);
    let far = || (Shift(30.0, 40.0), false, 0);
    vec![
        fixture("exact", &[exact(), exact(), exact(), exact(), exact(), exact(), exact(), exact(), exact(), exact()]),
        fixture("disjoint", &[far(), far(), far(), far(), far(), far(), far(), far(), far(), far()]),
        fixture(
            "all 25 px off",
            &[
                (Shift(25.0, 0.0), false, 0),
                (Shift(-25.0, 0.0), false, 0),
                (Shift(0.0, 25.0), false, 0),
                (Shift(0.0, -25.0), false, 0),
                (Shift(15.0, 20.0), false, 0),
                (Shift(-15.0, 20.0), false, 0),
                (Shift(20.0, -15.0), false, 0),
                (Shift(-20.0, -15.0), false, 0),
                (Shift(7.0, 24.0), false, 0),
                (Shift(24.0, 7.0), false, 0),
            ],
        ),
        fixture(
            "horizontal steps",
            &[
                (Shift(0.0, 0.0), true, 50),
                (Shift(1.0, 0.0), true, 41),
                (Shift(2.0, 0.0), true, 34),
                (Shift(3.0, 0.0), true, 27),
                (Shift(4.0, 0.0), true, 22),
                (Shift(5.0, 0.0), true, 17),
                (Shift(6.0, 0.0), true, 13),
                (Shift(7.0, 0.0), true, 9),
                (Shift(8.0, 0.0), true, 6),
                (Shift(9.0, 0.0), true, 3),
            ],
        ),
        fixture(
            "iou on thresholds",
            &[
                (Tall(50.0), true, 10),
                (Tall(50.0), true, 10),
                (Tall(100.0), true, 5),
                (Tall(100.0), true, 5),
                (Tall(25.0), true, 20),
                (Tall(25.0), true, 20),
                (Tall(12.5), true, 40),
                (Tall(12.5), true, 40),
                (Half, true, 25),
                (Half, true, 25),
            ],
        ),
        fixture(
            "center error on 20 px",
            &[
                (Shift(0.0, 20.0), true, 0),
                (Shift(12.0, 16.0), true, 0),
                (Shift(0.0, 20.5), false, 0),
                (Shift(20.0, 0.0), true, 0),
                (Shift(-16.0, -12.0), true, 0),
                (Shift(14.2, 14.2), false, 0),
                (Shift(0.0, 0.0), true, 50),
                (Shift(3.0, 4.0), true, 14),
                (Shift(10.0, 0.0), true, 0),
                (Shift(21.0, 0.0), false, 0),
            ],
        ),
        fixture("half lost", &[exact(), far(), exact(), far(), exact(), far(), exact(), far(), exact(), far()]),
        fixture(
            "small drifts",
            &[
                (Shift(1.0, 0.0), true, 41),
                (Shift(0.0, 1.0), true, 41),
                (Shift(-1.0, 0.0), true, 41),
                (Shift(2.0, 0.0), true, 34),
                (Shift(0.0, -2.0), true, 34),
                (Shift(-2.0, 0.0), true, 34),
                (Shift(3.0, 4.0), true, 14),
                (Shift(-4.0, 3.0), true, 14),
                (Shift(20.0, 0.0), true, 0),
                (Shift(0.0, -21.0), false, 0),
            ],
        ),
        fixture(
            "signed shifts",
            &[
                (Shift(-1.0, 0.0), true, 41),
                (Shift(0.0, -1.0), true, 41),
                (Shift(-5.0, 0.0), true, 17),
                (Shift(0.0, 5.0), true, 17),
                (Shift(-9.0, 0.0), true, 3),
                (Shift(0.0, -9.0), true, 3),
                (Shift(-6.0, 0.0), true, 13),
                (Shift(0.0, 7.0), true, 9),
                (Shift(-8.0, 0.0), true, 6),
                (Shift(0.0, 0.0), true, 50),
            ],
        ),
        fixture(
            "mixed",
            &[
                (Tall(12.5), true, 40),
                (Half, true, 25),
                (Shift(4.0, 0.0), true, 22),
                (Shift(3.0, 4.0), true, 14),
                (Shift(0.0, 10.0), true, 0),
                (Shift(0.0, 19.9), true, 0),
                (Shift(0.0, 20.0001), false, 0),
                (Shift(2.0, 0.0), true, 34),
                (Shift(0.0, 3.0), true, 27),
                (Shift(30.0, 40.0), false, 0),
            ],
        ),
    ]
}
