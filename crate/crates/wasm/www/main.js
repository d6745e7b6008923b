import init, { odmr_spectrum, rabi_curve, g2_curve } from "./pkg/nvlab_wasm.js";

function plot(canvas, c, xscale) {
  const g = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 36;
  g.clearRect(0, 0, w, h);
  const x = c.x.map((v) => v * xscale);
  const lo = Math.min(...c.y.map((v, i) => v - c.error[i]), ...c.y_fit);
  const hi = Math.max(...c.y.map((v, i) => v + c.error[i]), ...c.y_fit);
  const [x0, x1] = [Math.min(...x), Math.max(...x)];
  const px = (v) => pad + ((v - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (v) => h - pad - ((v - lo) / (hi - lo || 1)) * (h - 2 * pad);

  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  g.fillStyle = "#555";
  g.fillText(x0.toPrecision(4), pad, h - pad + 14);
  g.fillText(x1.toPrecision(4), w - pad - 30, h - pad + 14);
  g.fillText(hi.toPrecision(3), 2, pad + 4);
  g.fillText(lo.toPrecision(3), 2, h - pad);

  g.strokeStyle = "#1f6fb2";
  x.forEach((v, i) => {
    g.beginPath();
    g.moveTo(px(v), py(c.y[i] - c.error[i]));
    g.lineTo(px(v), py(c.y[i] + c.error[i]));
    g.stroke();
    g.fillRect(px(v) - 1.5, py(c.y[i]) - 1.5, 3, 3);
  });
  g.strokeStyle = "#d2462f";
  g.beginPath();
  x.forEach((v, i) => (i ? g.lineTo(px(v), py(c.y_fit[i])) : g.moveTo(px(v), py(c.y_fit[i]))));
  g.stroke();
}

function panel(id, run, xscale, summary) {
  const root = document.getElementById(id);
  const out = root.querySelector(".out");
  root.querySelector("button").addEventListener("click", () => {
    out.textContent = "measuring…";
    // Let the status text paint before the blocking call.
    setTimeout(() => {
      const t0 = performance.now();
      const r = JSON.parse(run(root));
      if (r.error) {
        out.textContent = r.error;
        return;
      }
      plot(root.querySelector("canvas"), r.curve, xscale);
      const wall = ((performance.now() - t0) / 1000).toFixed(1);
      out.textContent = `${summary(r)}  (${r.curve.simulated.toFixed(0)} s simulated, ${wall} s here)`;
    }, 10);
  });
}

const num = (root, name) => Number(root.querySelector(`[name=${name}]`).value);
let seed = 1;

await init();

panel("odmr", (r) => odmr_spectrum(num(r, "field"), num(r, "angle"), seed++), 1e-9,
  (r) => `|B| from splitting: ${r.field_gauss.toFixed(2)} G`);
panel("rabi", (r) => rabi_curve(num(r, "rabi"), num(r, "reps"), seed++), 1e9,
  (r) => `π pulse: ${(r.pi_time * 1e9).toFixed(2)} ns`);
panel("g2", (r) => g2_curve(r.querySelector("[name=pair]").checked, num(r, "duration"), seed++), 1e9,
  (r) => `g²(0) = ${r.g2_zero.toFixed(3)}`);
