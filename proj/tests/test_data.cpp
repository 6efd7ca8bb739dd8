#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "lmdet/data.hpp"
#include "lmdet/synth.hpp"

using namespace lmdet;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("lmdet_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    os << text;
}

Image flat_image(int w, int h, double value) { return Image(w, h, 1, value); }

Sample sample_with_landmarks(std::array<double, 6> coords, int size = 32) {
    Sample s;
    s.image = flat_image(size, size, 0.5);
    LandmarkSet lm;
    lm.coords = coords;
    s.landmarks = lm;
    return s;
}

}  // namespace

TEST_CASE("coordinate convention") {
    // pixel p on an axis of extent W -> 2p/(W-1) - 1, and back
    REQUIRE(pixel_to_norm(0, 32) == -1.0);
    REQUIRE(pixel_to_norm(31, 32) == 1.0);
    REQUIRE(pixel_to_norm(15.5, 32) == 0.0);
    REQUIRE(norm_to_pixel(0.0, 32) == 15.5);
    // a one-pixel offset at W=32 is 2/31 in normalized units
    REQUIRE(norm_to_pixel(2.0 / 31.0, 32) - norm_to_pixel(0.0, 32) == Catch::Approx(1.0));
}

TEST_CASE("load_dataset") {
    const auto dir = fresh_dir("load");
    // 320x320 grey image with a mark; annotation at pixel (160,160)
    write_image(flat_image(320, 320, 0.5), dir / "face_a.pgm");
    write_image(flat_image(320, 320, 0.25), dir / "face_b.pgm");

    SECTION("labeled load maps pixels through the closed-form convention") {
        write_text(dir / "ann.csv",
                   std::string(kAnnotationHeader) +
                       "\nface_a.pgm,160,160,200,100,160,240\n");
        Dataset ds = load_dataset(dir, dir / "ann.csv", 32, 1);
        REQUIRE(ds.labeled);
        REQUIRE(ds.size() == 1);
        const auto& lm = *ds.samples[0].landmarks;
        // align-corners: normalized coordinate depends only on the original extent
        REQUIRE(lm.coords[0] == 2.0 * 160 / 319 - 1.0);
        REQUIRE(lm.coords[1] == 2.0 * 160 / 319 - 1.0);
        REQUIRE(lm.coords[2] == 2.0 * 200 / 319 - 1.0);
        REQUIRE(lm.coords[3] == 2.0 * 100 / 319 - 1.0);
        REQUIRE(ds.samples[0].image.width == 32);
        REQUIRE(ds.samples[0].image.height == 32);
    }
    SECTION("no annotations gives an unlabeled dataset, lexicographic order") {
        Dataset ds = load_dataset(dir, std::nullopt, 32, 1);
        REQUIRE_FALSE(ds.labeled);
        REQUIRE(ds.size() == 2);
        REQUIRE(ds.samples[0].source_id == "face_a.pgm");
        REQUIRE(ds.samples[1].source_id == "face_b.pgm");
        REQUIRE_FALSE(ds.samples[0].landmarks.has_value());
    }
    SECTION("rows come back sorted by filename regardless of CSV order") {
        write_text(dir / "ann.csv", std::string(kAnnotationHeader) +
                                        "\nface_b.pgm,10,10,20,20,15,30\n"
                                        "face_a.pgm,10,10,20,20,15,30\n");
        Dataset ds = load_dataset(dir, dir / "ann.csv", 32, 1);
        REQUIRE(ds.samples[0].source_id == "face_a.pgm");
        REQUIRE(ds.samples[1].source_id == "face_b.pgm");
    }
    SECTION("duplicate row is an error naming the duplicate") {
        write_text(dir / "dup.csv", std::string(kAnnotationHeader) +
                                        "\nface_a.pgm,1,1,2,2,3,3\n"
                                        "face_a.pgm,4,4,5,5,6,6\n");
        try {
            load_dataset(dir, dir / "dup.csv", 32, 1);
            FAIL("expected duplicate error");
        } catch (const DataError& e) {
            REQUIRE(std::string(e.what()).find("face_a.pgm") != std::string::npos);
            REQUIRE(std::string(e.what()).find("row 3") != std::string::npos);
        }
    }
    SECTION("missing file, malformed row, out-of-bounds landmark") {
        write_text(dir / "missing.csv",
                   std::string(kAnnotationHeader) + "\nnope.pgm,1,1,2,2,3,3\n");
        REQUIRE_THROWS_AS(load_dataset(dir, dir / "missing.csv", 32, 1), DataError);

        write_text(dir / "malformed.csv",
                   std::string(kAnnotationHeader) + "\nface_a.pgm,1,1,2,2,3\n");
        REQUIRE_THROWS_AS(load_dataset(dir, dir / "malformed.csv", 32, 1), DataError);

        write_text(dir / "oob.csv",
                   std::string(kAnnotationHeader) + "\nface_a.pgm,1,1,2,2,3,99999\n");
        try {
            load_dataset(dir, dir / "oob.csv", 32, 1);
            FAIL("expected out-of-bounds error");
        } catch (const DataError& e) {
            REQUIRE(std::string(e.what()).find("row 2") != std::string::npos);
        }
        write_text(dir / "badhdr.csv", "file,x1\nface_a.pgm,1\n");
        REQUIRE_THROWS_AS(load_dataset(dir, dir / "badhdr.csv", 32, 1), DataError);
    }
}

TEST_CASE("RGB images load as channel-average grayscale") {
    const auto dir = fresh_dir("rgb");
    Image rgb(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            rgb.at(0, y, x) = 1.0;   // r
            rgb.at(1, y, x) = 0.5;   // g
            rgb.at(2, y, x) = 0.0;   // b
        }
    write_image(rgb, dir / "c.ppm");
    Image back = read_image(dir / "c.ppm");
    REQUIRE(back.channels == 3);
    REQUIRE(back.at(0, 3, 3) == 1.0);
    Image grey = to_grayscale(back);
    REQUIRE(grey.channels == 1);
    REQUIRE(grey.at(0, 3, 3) == Catch::Approx(0.5).margin(1e-2));

    // loading the same directory in 3-channel mode keeps the planes
    Dataset ds3 = load_dataset(dir, std::nullopt, 32, 3);
    REQUIRE(ds3.samples[0].image.channels == 3);

    // truncated raster is rejected
    {
        std::ofstream os(dir / "bad.pgm", std::ios::binary);
        os << "P5\n8 8\n255\n";
        os.write("xy", 2);
    }
    REQUIRE_THROWS_AS(read_image(dir / "bad.pgm"), DataError);
}

TEST_CASE("rotation augmentation") {
    SECTION("angle 0 is the identity") {
        Sample s = sample_with_landmarks({0.3, -0.2, 0.5, 0.1, 0.0, 0.4});
        Sample r = rotate_sample(s, 0.0);
        REQUIRE(r.landmarks->coords == s.landmarks->coords);
        REQUIRE(r.image.px == s.image.px);
    }
    SECTION("+90 degrees takes (0.5,0) to (0,0.5) with y down") {
        Sample s = sample_with_landmarks({0.5, 0.0, 0.0, 0.0, 0.0, 0.0});
        Sample r = rotate_sample(s, 90.0);
        REQUIRE(r.landmarks->coords[0] == Catch::Approx(0.0).margin(1e-12));
        REQUIRE(r.landmarks->coords[1] == Catch::Approx(0.5).margin(1e-12));
    }
    SECTION("rotation composed with its inverse recovers the landmarks") {
        Sample s = sample_with_landmarks({0.3, -0.2, 0.5, 0.1, -0.1, 0.4});
        Sample r = rotate_sample(rotate_sample(s, 17.5), -17.5);
        for (int i = 0; i < 6; ++i)
            REQUIRE(r.landmarks->coords[static_cast<std::size_t>(i)] ==
                    Catch::Approx(s.landmarks->coords[static_cast<std::size_t>(i)]).margin(1e-9));
    }
    SECTION("out-of-bounds rotations are resampled") {
        Sample s = sample_with_landmarks({0.9, 0.9, 0.0, 0.0, 0.0, 0.0});
        Rng rng(5);
        Sample r = augment_rotation(s, 30.0, rng);  // 30 degrees pushes past 1
        REQUIRE(r.landmarks->in_bounds());
    }
    SECTION("hopeless landmarks pass through unrotated after bounded retries") {
        Sample s = sample_with_landmarks({0.9999, 0.9999, 0.0, 0.0, 0.0, 0.0});
        Rng rng(5);
        Sample r = augment_rotation(s, 20.0, rng);
        REQUIRE(r.landmarks->coords == s.landmarks->coords);
        REQUIRE(r.image.px == s.image.px);
    }
    SECTION("rotated landmark tracks the rotated image content within a pixel") {
        // dark disc on a light field, rotated 25 degrees
        Sample s;
        s.image = flat_image(32, 32, 1.0);
        const int px = 21, py = 9;
        for (int y = py - 2; y <= py + 2; ++y)
            for (int x = px - 2; x <= px + 2; ++x)
                if ((x - px) * (x - px) + (y - py) * (y - py) <= 4) s.image.at(0, y, x) = 0.0;
        LandmarkSet lm;
        lm.coords = {pixel_to_norm(px, 32), pixel_to_norm(py, 32), 0, 0, 0, 0};
        s.landmarks = lm;

        Sample r = rotate_sample(s, 25.0);
        double cx = 0, cy = 0, mass = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double dark = 1.0 - r.image.at(0, y, x);
                cx += dark * x;
                cy += dark * y;
                mass += dark;
            }
        cx /= mass;
        cy /= mass;
        REQUIRE(std::abs(cx - norm_to_pixel(r.landmarks->coords[0], 32)) <= 1.0);
        REQUIRE(std::abs(cy - norm_to_pixel(r.landmarks->coords[1], 32)) <= 1.0);
    }
}

TEST_CASE("target augmentation") {
    SECTION("zero translation and zero noise is the identity") {
        Sample s = sample_with_landmarks({0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
        Sample t = translate_sample(s, 0, 0);
        REQUIRE(t.image.px == s.image.px);
        REQUIRE(t.landmarks->coords == s.landmarks->coords);
        Rng rng(1);
        add_noise(t, 0.0, rng);
        REQUIRE(t.image.px == s.image.px);
    }
    SECTION("translation moves landmarks by the same normalized offset") {
        Sample s = sample_with_landmarks({0.0, 0.0, 0.2, 0.2, -0.4, 0.1});
        Sample t = translate_sample(s, 3, -2);
        REQUIRE(t.landmarks->coords[0] == Catch::Approx(6.0 / 31.0));
        REQUIRE(t.landmarks->coords[1] == Catch::Approx(-4.0 / 31.0));
    }
    SECTION("bound rule keeps augmented landmarks inside [-1,1]") {
        Sample s = sample_with_landmarks({0.95, 0.0, 0.0, 0.0, 0.0, 0.0});
        Rng rng(7);
        for (int trial = 0; trial < 20; ++trial) {
            Sample t = augment_target(s, rng);
            REQUIRE(t.landmarks->in_bounds());
            for (double v : t.image.px) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
        }
    }
    SECTION("noise output stays clamped to [0,1] even for large sigma") {
        Sample s = sample_with_landmarks({0, 0, 0, 0, 0, 0});
        Rng rng(3);
        add_noise(s, 5.0, rng);
        for (double v : s.image.px) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("batch stream") {
    SECTION("10 samples at batch 3 -> 3,3,3,1") {
        BatchStream bs(10, 3, Rng(1), false);
        std::vector<std::size_t> sizes;
        std::set<int> seen;
        while (auto b = bs.next()) {
            sizes.push_back(b->size());
            for (int i : *b) seen.insert(i);
        }
        REQUIRE(sizes == std::vector<std::size_t>{3, 3, 3, 1});
        REQUIRE(seen.size() == 10);
    }
    SECTION("same seed, same composition") {
        BatchStream a(10, 4, Rng(42), false), b(10, 4, Rng(42), false);
        while (true) {
            auto x = a.next();
            auto y = b.next();
            REQUIRE(x.has_value() == y.has_value());
            if (!x) break;
            REQUIRE(*x == *y);
        }
    }
    SECTION("cycling stream is unbounded and reshuffles per epoch") {
        BatchStream bs(2, 1, Rng(9), true);
        for (int i = 0; i < 7; ++i) REQUIRE(bs.next().has_value());
    }
    SECTION("empty dataset and bad batch size rejected") {
        REQUIRE_THROWS_AS(BatchStream(0, 3, Rng(1), false), DataError);
        REQUIRE_THROWS_AS(BatchStream(5, 0, Rng(1), false), DataError);
    }
}

TEST_CASE("synthetic generator") {
    SECTION("deterministic per (domain, seed)") {
        Dataset a = generate_synthetic(Domain::source, 4, 7);
        Dataset b = generate_synthetic(Domain::source, 4, 7);
        REQUIRE(a.size() == 4);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a.samples[i].image.px == b.samples[i].image.px);
            REQUIRE(a.samples[i].landmarks->coords == b.samples[i].landmarks->coords);
        }
        Dataset c = generate_synthetic(Domain::source, 4, 8);
        REQUIRE(a.samples[0].image.px != c.samples[0].image.px);
    }
    SECTION("labels stay inside their placement bands") {
        for (Domain d : {Domain::source, Domain::target}) {
            Dataset ds = generate_synthetic(d, 50, 3);
            for (const auto& s : ds.samples) {
                const auto& c = s.landmarks->coords;
                const auto px = [](double v) { return norm_to_pixel(v, 32); };
                REQUIRE(px(c[0]) >= 6);  REQUIRE(px(c[0]) <= 14);  // left eye x
                REQUIRE(px(c[1]) >= 8);  REQUIRE(px(c[1]) <= 14);
                REQUIRE(px(c[2]) >= 18); REQUIRE(px(c[2]) <= 26);  // right eye x
                REQUIRE(px(c[3]) >= 8);  REQUIRE(px(c[3]) <= 14);
                REQUIRE(px(c[4]) >= 12); REQUIRE(px(c[4]) <= 20);  // nose x
                REQUIRE(px(c[5]) >= 18); REQUIRE(px(c[5]) <= 24);
                for (double v : c) REQUIRE((v >= -1.0 && v <= 1.0));
            }
        }
    }
    SECTION("source images are brighter than target images") {
        Dataset src = generate_synthetic(Domain::source, 20, 5);
        Dataset tgt = generate_synthetic(Domain::target, 20, 5);
        auto mean = [](const Dataset& ds) {
            double s = 0;
            std::size_t n = 0;
            for (const auto& smp : ds.samples) {
                for (double v : smp.image.px) s += v;
                n += smp.image.px.size();
            }
            return s / static_cast<double>(n);
        };
        REQUIRE(mean(src) > mean(tgt));
    }
    SECTION("pixel values stay in [0,1]") {
        for (Domain d : {Domain::source, Domain::target})
            for (const auto& s : generate_synthetic(d, 10, 11).samples)
                for (double v : s.image.px) {
                    REQUIRE(v >= 0.0);
                    REQUIRE(v <= 1.0);
                }
    }
    SECTION("written dataset reloads with identical labels") {
        const auto dir = fresh_dir("synthio");
        Dataset ds = generate_synthetic(Domain::target, 6, 13);
        write_dataset(ds, dir);
        Dataset back = load_dataset(dir, dir / "annotations.csv", 32, 1);
        REQUIRE(back.labeled);
        REQUIRE(back.size() == ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) {
            REQUIRE(back.samples[i].source_id == ds.samples[i].source_id);
            for (int k = 0; k < 6; ++k)
                REQUIRE(back.samples[i].landmarks->coords[static_cast<std::size_t>(k)] ==
                        ds.samples[i].landmarks->coords[static_cast<std::size_t>(k)]);
            // images only pass through 8-bit quantization
            double max_diff = 0.0;
            for (std::size_t j = 0; j < ds.samples[i].image.px.size(); ++j)
                max_diff = std::max(max_diff, std::abs(back.samples[i].image.px[j] -
                                                       ds.samples[i].image.px[j]));
            REQUIRE(max_diff <= 0.5 / 255.0 + 1e-12);
        }
    }
}
