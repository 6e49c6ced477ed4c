macro_rules! example {
    ($name:ident, $file:literal) => {
        #[allow(dead_code)]
        #[path = $file]
        mod $name;

        #[test]
        fn $name() {
            $name::run_example().unwrap();
        }
    };
}

example!(autodiff, "../examples/autodiff.rs");
example!(cifar10, "../examples/cifar10.rs");
example!(config_and_checkpoint, "../examples/config_and_checkpoint.rs");
example!(gradient_check, "../examples/gradient_check.rs");
example!(proxy_labels, "../examples/proxy_labels.rs");
example!(three_spirals, "../examples/three_spirals.rs");
example!(two_moons, "../examples/two_moons.rs");
example!(whitening, "../examples/whitening.rs");
