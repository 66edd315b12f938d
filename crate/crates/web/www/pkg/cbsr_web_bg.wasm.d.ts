/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const boosting_ks_json: (a: number, b: number, c: number, d: number) => [number, number];
export const score_curves_json: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const stepwise_json: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
