import init, { Demo } from "./pkg/ridgeband_wasm.js";

const $ = (id) => document.getElementById(id);
const status = (text) => { $("status").textContent = text; };
let demo = null;

function draw() {
  const canvas = $("view");
  canvas.width = demo.frames();
  canvas.height = demo.rows();
  const pixels = new Uint8ClampedArray(demo.image());
  canvas.getContext("2d").putImageData(new ImageData(pixels, canvas.width, canvas.height), 0, 0);
}

// Let the status line paint before a long synchronous call.
const later = (f) => new Promise((resolve) => setTimeout(() => resolve(f()), 20));

async function run(label, f) {
  status(`${label}...`);
  try {
    const t0 = performance.now();
    const out = await later(f);
    status(`${label} done in ${((performance.now() - t0) / 1000).toFixed(1)} s${out ? `: ${out}` : ""}`);
  } catch (e) {
    status(`${label} failed: ${e.message ?? e}`);
  }
}

$("generate").onclick = () => run("generate", () => {
  demo?.free();
  demo = new Demo(Number($("n").value), Number($("snr").value), $("noise").value, BigInt($("seed").value));
  draw();
  $("estimate").disabled = false;
  $("score").disabled = true;
});

$("method").onchange = () => {
  $("strength").value = $("method").value === "sem-laplacian" ? "0.01" : "0.001";
};

$("estimate").onclick = () => run("estimate", () => {
  demo.estimate($("method").value, Number($("strength").value), BigInt($("seed").value));
  draw();
  $("score").disabled = false;
});

$("score").onclick = () => run("score", () =>
  Array.from(demo.score(), (q, k) => `mode ${k + 1} RQF ${q.toFixed(2)} dB`).join(", "));

await init();
status("ready");
