/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const g2_curve: (a: number, b: number, c: number) => [number, number];
export const odmr_spectrum: (a: number, b: number, c: number) => [number, number];
export const rabi_curve: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
